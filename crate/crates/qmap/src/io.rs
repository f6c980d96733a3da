//! Binary containers: training datasets (Qmatrix or padded-signal payloads),
//! parameter-map volumes, and small read/write helpers. All numeric payloads
//! are little-endian 32-bit floats.

use crate::error::{QmapError, Result};
use crate::qmatrix::{QmatrixConfig, QmatrixVariant};
use crate::ModelKind;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DATASET_MAGIC: &[u8; 4] = b"QMAP";
const SIGNAL_MAGIC: &[u8; 4] = b"QSIG";
const DATASET_VERSION: u16 = 1;

/// Per-sample payload layout of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DatasetLayout {
    /// Quantized q-space tensors of shape (q_n, q_n, channels); the 3D
    /// variant stores channels = q_n.
    Qmatrix {
        q_n: usize,
        channels: usize,
        variant: QmatrixVariant,
    },
    /// Fixed-scheme signal vectors zero-padded to `input_len`.
    Signals { input_len: usize },
}

impl DatasetLayout {
    pub fn input_len(&self) -> usize {
        match *self {
            DatasetLayout::Qmatrix { q_n, channels, .. } => q_n * q_n * channels,
            DatasetLayout::Signals { input_len } => input_len,
        }
    }
}

/// In-memory dataset: row-per-sample inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model: ModelKind,
    pub layout: DatasetLayout,
    pub inputs: Array2<f32>,
    pub labels: Array2<f32>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.ncols()
    }
}

/// Sidecar metadata written next to every generated dataset
/// (`<dataset>.json`): priors, simulation config, and the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: ModelKind,
    pub seed: u64,
    pub sim: crate::forward::SimConfig,
    pub snr_range: Option<(f64, f64)>,
    pub qmatrix: Option<QmatrixConfig>,
    /// Scheme-file text when every sample shares one scheme.
    pub fixed_scheme: Option<String>,
    pub priors: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes a dataset plus its JSON sidecar.
///
/// Header: magic, version, model tag, sample count, then the layout fields
/// (q_n + channel count for Qmatrix payloads, input length for signal
/// payloads) and the label dimension. Samples follow as f32 input + label.
pub fn write_dataset(path: &Path, ds: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    match ds.layout {
        DatasetLayout::Qmatrix { q_n, channels, .. } => {
            w.write_all(DATASET_MAGIC)?;
            write_u16(&mut w, DATASET_VERSION)?;
            w.write_all(&[ds.model.tag()])?;
            write_u64(&mut w, ds.n_samples() as u64)?;
            write_u32(&mut w, q_n as u32)?;
            write_u32(&mut w, channels as u32)?;
            write_u32(&mut w, ds.label_dim() as u32)?;
        }
        DatasetLayout::Signals { input_len } => {
            w.write_all(SIGNAL_MAGIC)?;
            write_u16(&mut w, DATASET_VERSION)?;
            w.write_all(&[ds.model.tag()])?;
            write_u64(&mut w, ds.n_samples() as u64)?;
            write_u32(&mut w, input_len as u32)?;
            write_u32(&mut w, ds.label_dim() as u32)?;
        }
    }
    for i in 0..ds.n_samples() {
        write_f32s(&mut w, ds.inputs.row(i).as_slice().expect("row-major"))?;
        write_f32s(&mut w, ds.labels.row(i).as_slice().expect("row-major"))?;
    }
    w.flush()?;

    let sidecar = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(sidecar), meta)?;
    Ok(())
}

/// Reads a dataset; consults the sidecar for the Qmatrix variant and falls
/// back to inferring it from the channel count (3 or 9: 2D projections;
/// channels == q_n: 3D grid).
pub fn read_dataset(path: &Path) -> Result<(Dataset, Option<DatasetMeta>)> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    let version = read_u16(&mut r)?;
    if version != DATASET_VERSION {
        return Err(QmapError::Data(format!("unsupported dataset version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let model = ModelKind::from_tag(tag[0])?;
    let n = read_u64(&mut r)? as usize;

    let meta: Option<DatasetMeta> = match File::open(sidecar_path(path)) {
        Ok(f) => Some(serde_json::from_reader(BufReader::new(f))?),
        Err(_) => None,
    };

    let layout = match &magic {
        m if m == DATASET_MAGIC => {
            let q_n = read_u32(&mut r)? as usize;
            let channels = read_u32(&mut r)? as usize;
            let variant = match meta.as_ref().and_then(|m| m.qmatrix) {
                Some(q) => q.variant,
                None if channels == 3 || channels == 9 => QmatrixVariant::TwoD,
                None if channels == q_n => QmatrixVariant::ThreeD,
                None => {
                    return Err(QmapError::Data(format!(
                        "cannot infer Qmatrix variant for {channels} channels; sidecar missing"
                    )))
                }
            };
            DatasetLayout::Qmatrix { q_n, channels, variant }
        }
        m if m == SIGNAL_MAGIC => {
            let input_len = read_u32(&mut r)? as usize;
            DatasetLayout::Signals { input_len }
        }
        _ => return Err(QmapError::Data("not a dataset file".into())),
    };
    let label_dim = read_u32(&mut r)? as usize;
    let in_len = layout.input_len();

    let mut inputs = Vec::with_capacity(n * in_len);
    let mut labels = Vec::with_capacity(n * label_dim);
    for _ in 0..n {
        inputs.extend(read_f32s(&mut r, in_len)?);
        labels.extend(read_f32s(&mut r, label_dim)?);
    }
    Ok((
        Dataset {
            model,
            layout,
            inputs: Array2::from_shape_vec((n, in_len), inputs)
                .map_err(|e| QmapError::Data(e.to_string()))?,
            labels: Array2::from_shape_vec((n, label_dim), labels)
                .map_err(|e| QmapError::Data(e.to_string()))?,
        },
        meta,
    ))
}

/// A 4D volume of named channels: shape (nx, ny, nz, channels), row-major
/// with the channel axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 4],
    pub params: Vec<String>,
    pub model: Option<ModelKind>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    shape: [usize; 4],
    params: Vec<String>,
    model: Option<ModelKind>,
}

impl Volume {
    pub fn new(shape: [usize; 4], params: Vec<String>, model: Option<ModelKind>) -> Result<Self> {
        if shape[3] != params.len() {
            return Err(QmapError::Shape(format!(
                "{} channels vs {} parameter names",
                shape[3],
                params.len()
            )));
        }
        let len = shape.iter().product();
        Ok(Volume { shape, params, model, data: vec![0.0; len] })
    }

    pub fn n_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        ((x * self.shape[1] + y) * self.shape[2] + z) * self.shape[3] + c
    }

    /// Channel values of one voxel (flat voxel index, channel-fastest).
    pub fn voxel(&self, v: usize) -> &[f32] {
        let c = self.shape[3];
        &self.data[v * c..(v + 1) * c]
    }

    pub fn voxel_mut(&mut self, v: usize) -> &mut [f32] {
        let c = self.shape[3];
        &mut self.data[v * c..(v + 1) * c]
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| QmapError::Data(format!("volume has no channel `{name}`")))
    }
}

/// Volume file: u32 JSON header length, JSON {shape, params, model},
/// then f32 little-endian data.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let header = serde_json::to_vec(&VolumeHeader {
        shape: vol.shape,
        params: vol.params.clone(),
        model: vol.model,
    })?;
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write_u32(&mut w, header.len() as u32)?;
    w.write_all(&header)?;
    write_f32s(&mut w, &vol.data)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let len = read_u32(&mut r)? as usize;
    if len > 1 << 20 {
        return Err(QmapError::Data("volume header too large".into()));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: VolumeHeader = serde_json::from_slice(&header)?;
    let n: usize = header.shape.iter().product();
    let data = read_f32s(&mut r, n)?;
    Ok(Volume {
        shape: header.shape,
        params: header.params,
        model: header.model,
        data,
    })
}

/// Flat CSV export: one row per voxel, one column per channel.
pub fn write_volume_csv(path: &Path, vol: &Volume) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "voxel,{}", vol.params.join(","))?;
    for v in 0..vol.n_voxels() {
        let vals: Vec<String> = vol.voxel(v).iter().map(|x| x.to_string()).collect();
        writeln!(w, "{v},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}
