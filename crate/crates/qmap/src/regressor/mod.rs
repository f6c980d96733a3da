//! Trainable regressors mapping encoded q-space inputs to diffusion model
//! parameters: a compact residual convolutional network and the
//! scheme-locked MLP baseline, each trained from scratch.

pub mod layers;
pub mod train;

pub use layers::{ConvGeom, LayerSpec, Tensor, LEAKY_SLOPE};
pub use train::{backward_and_step, infer_volume, train, AdamState, TrainConfig, TrainReport};

use crate::error::{QmapError, Result};
use crate::io::{read_f32s, write_f32s};
use crate::qmatrix::{Qmatrix, QmatrixConfig, QmatrixVariant};
use crate::{ModelKind, ParamVector};
use ndarray::{Array2, ArrayD, IxDyn, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// MLP baseline layer-size chains (input through output).
pub const MLP_DTI_SIZES: [usize; 5] = [32, 256, 256, 256, 4];
pub const MLP_NODDI_SIZES: [usize; 5] = [104, 400, 400, 400, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    ResConv,
    Mlp,
}

/// What the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InputKind {
    Qmatrix2d { q_n: usize, channels: usize },
    Qmatrix3d { q_n: usize },
    /// Zero-padded signal vector (scheme-locked baseline).
    Signals { len: usize },
}

impl InputKind {
    pub fn flat_len(&self) -> usize {
        match *self {
            InputKind::Qmatrix2d { q_n, channels } => q_n * q_n * channels,
            InputKind::Qmatrix3d { q_n } => q_n * q_n * q_n,
            InputKind::Signals { len } => len,
        }
    }
}

/// Architecture description; serialized as JSON inside the weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub model: ModelKind,
    pub input: InputKind,
    pub output_dim: usize,
    pub seed: u64,
    /// Residual-path width (first conv output channels).
    pub conv_channels: usize,
    pub res_blocks: usize,
    pub dense_width: usize,
    /// Hidden widths of the MLP baseline.
    pub mlp_hidden: Vec<usize>,
    /// Per-output factor mapping network units to map units.
    pub output_scale: Vec<f64>,
    /// Encoder used to build inputs at inference (ResConv kinds).
    pub qmatrix: Option<QmatrixConfig>,
}

impl NetworkSpec {
    /// Residual conv regressor over a Qmatrix encoding.
    pub fn resconv(model: ModelKind, q_cfg: QmatrixConfig, seed: u64) -> Self {
        let input = match q_cfg.variant {
            QmatrixVariant::TwoD => InputKind::Qmatrix2d {
                q_n: q_cfg.q_n,
                channels: if q_cfg.per_shell { 9 } else { 3 },
            },
            QmatrixVariant::ThreeD => InputKind::Qmatrix3d { q_n: q_cfg.q_n },
        };
        NetworkSpec {
            kind: NetKind::ResConv,
            model,
            input,
            output_dim: model.param_dim(),
            seed,
            conv_channels: 32,
            res_blocks: 2,
            dense_width: 128,
            mlp_hidden: vec![],
            output_scale: model.output_scale(),
            qmatrix: Some(q_cfg),
        }
    }

    /// Scheme-locked MLP baseline with the published layer sizes.
    pub fn mlp(model: ModelKind, seed: u64) -> Self {
        let sizes: &[usize] = match model {
            ModelKind::Dti => &MLP_DTI_SIZES,
            ModelKind::Noddi => &MLP_NODDI_SIZES,
        };
        NetworkSpec {
            kind: NetKind::Mlp,
            model,
            input: InputKind::Signals { len: sizes[0] },
            output_dim: *sizes.last().expect("non-empty"),
            seed,
            conv_channels: 0,
            res_blocks: 0,
            dense_width: 0,
            mlp_hidden: sizes[1..sizes.len() - 1].to_vec(),
            output_scale: model.output_scale(),
            qmatrix: None,
        }
    }

    /// Expands the spec into the layer chain, validating shapes.
    pub fn build_layers(&self) -> Result<Vec<LayerSpec>> {
        if self.output_dim == 0 {
            return Err(QmapError::Config("output_dim must be positive".into()));
        }
        if self.output_scale.len() != self.output_dim {
            return Err(QmapError::Config(
                "output_scale length must match output_dim".into(),
            ));
        }
        match self.kind {
            NetKind::ResConv => {
                let (in_ch, q_n) = match self.input {
                    InputKind::Qmatrix2d { q_n, channels } => (channels, q_n),
                    InputKind::Qmatrix3d { q_n } => (1, q_n),
                    InputKind::Signals { .. } => {
                        return Err(QmapError::Config(
                            "resconv expects a Qmatrix input".into(),
                        ))
                    }
                };
                if self.conv_channels == 0 || self.dense_width == 0 {
                    return Err(QmapError::Config("zero-width layer".into()));
                }
                // first kernel is 7x7 (2D) or 7x7x7 (3D), stride 2
                let first = ConvGeom {
                    in_ch,
                    out_ch: self.conv_channels,
                    k: 7,
                    stride: 2,
                    pad: 3,
                };
                if first.out_len(q_n) == 0 {
                    return Err(QmapError::Config(format!(
                        "q_n = {q_n} collapses under the first convolution"
                    )));
                }
                let res = ConvGeom {
                    in_ch: self.conv_channels,
                    out_ch: self.conv_channels,
                    k: 3,
                    stride: 1,
                    pad: 1,
                };
                let is3d = matches!(self.input, InputKind::Qmatrix3d { .. });
                let mut layers = Vec::new();
                layers.push(if is3d {
                    LayerSpec::Conv3d(first)
                } else {
                    LayerSpec::Conv2d(first)
                });
                layers.push(LayerSpec::LeakyRelu);
                for _ in 0..self.res_blocks {
                    layers.push(if is3d {
                        LayerSpec::Res3d(res)
                    } else {
                        LayerSpec::Res2d(res)
                    });
                }
                layers.push(LayerSpec::GlobalAvgPool);
                layers.push(LayerSpec::Dense {
                    inp: self.conv_channels,
                    out: self.dense_width,
                });
                layers.push(LayerSpec::LeakyRelu);
                layers.push(LayerSpec::Dense {
                    inp: self.dense_width,
                    out: self.output_dim,
                });
                Ok(layers)
            }
            NetKind::Mlp => {
                let len = match self.input {
                    InputKind::Signals { len } => len,
                    _ => {
                        return Err(QmapError::Config(
                            "mlp expects a signal-vector input".into(),
                        ))
                    }
                };
                let mut sizes = vec![len];
                sizes.extend(&self.mlp_hidden);
                sizes.push(self.output_dim);
                if sizes.iter().any(|&s| s == 0) {
                    return Err(QmapError::Config("zero-width layer".into()));
                }
                let mut layers = Vec::new();
                for w in sizes.windows(2) {
                    layers.push(LayerSpec::Dense { inp: w[0], out: w[1] });
                    layers.push(LayerSpec::LeakyRelu);
                }
                layers.pop(); // no activation after the output layer
                Ok(layers)
            }
        }
    }
}

/// A network: spec, layer chain, and the flat weight store.
#[derive(Debug, Clone)]
pub struct Network<F: NdFloat = f32> {
    pub spec: NetworkSpec,
    layers: Vec<LayerSpec>,
    /// (offset, len) into `weights` per layer.
    offsets: Vec<(usize, usize)>,
    pub weights: Vec<F>,
}

/// Xavier/Glorot-uniform initialization, deterministic per spec seed;
/// biases start at zero.
pub fn init_network<F: NdFloat>(spec: &NetworkSpec) -> Result<Network<F>> {
    let layers = spec.build_layers()?;
    let mut offsets = Vec::with_capacity(layers.len());
    let mut total = 0usize;
    for l in &layers {
        let n = l.n_params();
        offsets.push((total, n));
        total += n;
    }
    let mut weights = vec![F::zero(); total];
    let mut rng = crate::math::stream_rng(spec.seed, 0);
    for (l, &(ofs, _len)) in layers.iter().zip(&offsets) {
        let Some((fan_in, fan_out)) = l.fans() else {
            continue;
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        match l {
            LayerSpec::Res2d(g) => {
                let per = g.params_2d();
                fill_params(&mut weights[ofs..ofs + per], g.out_ch, limit, &mut rng);
                fill_params(&mut weights[ofs + per..ofs + 2 * per], g.out_ch, limit, &mut rng);
            }
            LayerSpec::Res3d(g) => {
                let per = g.params_3d();
                fill_params(&mut weights[ofs..ofs + per], g.out_ch, limit, &mut rng);
                fill_params(&mut weights[ofs + per..ofs + 2 * per], g.out_ch, limit, &mut rng);
            }
            LayerSpec::Conv2d(g) | LayerSpec::Conv3d(g) => {
                fill_params(&mut weights[ofs..ofs + l.n_params()], g.out_ch, limit, &mut rng);
            }
            LayerSpec::Dense { out, .. } => {
                fill_params(&mut weights[ofs..ofs + l.n_params()], *out, limit, &mut rng);
            }
            _ => {}
        }
    }
    Ok(Network { spec: spec.clone(), layers, offsets, weights })
}

/// Fills `params` (weights then `n_bias` biases) with U(-limit, limit)
/// weights and zero biases.
fn fill_params<F: NdFloat, R: Rng>(params: &mut [F], n_bias: usize, limit: f64, rng: &mut R) {
    let n_w = params.len() - n_bias;
    for p in &mut params[..n_w] {
        *p = F::from(rng.random_range(-limit..limit)).expect("fits");
    }
    for p in &mut params[n_w..] {
        *p = F::zero();
    }
}

impl<F: NdFloat> Network<F> {
    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn params_of(&self, i: usize) -> &[F] {
        let (ofs, len) = self.offsets[i];
        &self.weights[ofs..ofs + len]
    }

    /// Forward pass keeping per-layer caches for the backward pass.
    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Array2<F>, Vec<layers::Cache<F>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let (y, cache) = l.forward(self.params_of(i), &cur)?;
            caches.push(cache);
            cur = y;
        }
        let out = cur.flat()?.clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(QmapError::Numerical("non-finite network output".into()));
        }
        Ok((out, caches))
    }

    /// Forward pass without keeping caches around.
    pub fn forward_batch(&self, x: &Tensor<F>) -> Result<Array2<F>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Backward pass: dL/d(weights) given dL/d(outputs).
    pub fn backward(&self, caches: &[layers::Cache<F>], dout: Array2<F>) -> Result<Vec<F>> {
        let mut grads = vec![F::zero(); self.weights.len()];
        let mut dy = Tensor::Flat(dout);
        for i in (0..self.layers.len()).rev() {
            let (ofs, len) = self.offsets[i];
            dy = self.layers[i].backward(
                self.params_of(i),
                &mut grads[ofs..ofs + len],
                dy,
                &caches[i],
            )?;
        }
        Ok(grads)
    }

    /// Builds the batched network input from dataset rows (each row is the
    /// serialized payload of one sample).
    pub fn batch_from_rows(&self, rows: &Array2<F>) -> Result<Tensor<F>> {
        let n = rows.nrows();
        match self.spec.input {
            InputKind::Qmatrix2d { q_n, channels } => {
                if rows.ncols() != q_n * q_n * channels {
                    return Err(QmapError::Shape(format!(
                        "row length {} vs Qmatrix {q_n}x{q_n}x{channels}",
                        rows.ncols()
                    )));
                }
                // rows store (i, j, c) with c fastest; network wants (n, c, i, j)
                let mut x = ArrayD::<F>::zeros(IxDyn(&[n, channels, q_n, q_n]));
                {
                    let xs = x.as_slice_mut().expect("standard layout");
                    for ni in 0..n {
                        let row = rows.row(ni);
                        let rs = row.as_slice().expect("row-major");
                        for i in 0..q_n {
                            for j in 0..q_n {
                                let src = (i * q_n + j) * channels;
                                for c in 0..channels {
                                    xs[((ni * channels + c) * q_n + i) * q_n + j] = rs[src + c];
                                }
                            }
                        }
                    }
                }
                Ok(Tensor::Spatial(x))
            }
            InputKind::Qmatrix3d { q_n } => {
                if rows.ncols() != q_n * q_n * q_n {
                    return Err(QmapError::Shape(format!(
                        "row length {} vs Qmatrix {q_n}^3",
                        rows.ncols()
                    )));
                }
                let mut x = ArrayD::<F>::zeros(IxDyn(&[n, 1, q_n, q_n, q_n]));
                {
                    let xs = x.as_slice_mut().expect("standard layout");
                    for ni in 0..n {
                        let row = rows.row(ni);
                        let rs = row.as_slice().expect("row-major");
                        xs[ni * rs.len()..(ni + 1) * rs.len()].copy_from_slice(rs);
                    }
                }
                Ok(Tensor::Spatial(x))
            }
            InputKind::Signals { len } => {
                if rows.ncols() != len {
                    return Err(QmapError::Shape(format!(
                        "row length {} vs signal vector {len}",
                        rows.ncols()
                    )));
                }
                Ok(Tensor::Flat(rows.clone()))
            }
        }
    }
}

impl Network<f32> {
    /// Single-sample prediction from an encoded Qmatrix, in map units.
    pub fn forward_pass(&self, qm: &Qmatrix) -> Result<ParamVector> {
        let row: Vec<f32> = qm.data.iter().map(|&v| v as f32).collect();
        let rows = Array2::from_shape_vec((1, row.len()), row)
            .map_err(|e| QmapError::Shape(e.to_string()))?;
        self.predict_rows(&rows)
            .map(|mut v| ParamVector::new(self.spec.model, v.remove(0)).expect("dim checked"))
    }

    /// Predictions in map units (output scale applied) for payload rows.
    pub fn predict_rows(&self, rows: &Array2<f32>) -> Result<Vec<Vec<f64>>> {
        let x = self.batch_from_rows(rows)?;
        let out = self.forward_batch(&x)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .zip(&self.spec.output_scale)
                    .map(|(&v, &s)| v as f64 * s)
                    .collect()
            })
            .collect())
    }
}

const NET_MAGIC: &[u8; 4] = b"QNET";

/// Weight file: magic, u32 spec-JSON length, spec JSON, u64 weight count,
/// f32 little-endian weights.
pub fn save_network(path: &Path, net: &Network<f32>) -> Result<()> {
    let spec_json = serde_json::to_vec(&net.spec)?;
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(NET_MAGIC)?;
    w.write_all(&(spec_json.len() as u32).to_le_bytes())?;
    w.write_all(&spec_json)?;
    w.write_all(&(net.weights.len() as u64).to_le_bytes())?;
    write_f32s(&mut w, &net.weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network<f32>> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NET_MAGIC {
        return Err(QmapError::Data("not a network weight file".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let spec_len = u32::from_le_bytes(len4) as usize;
    if spec_len > 1 << 20 {
        return Err(QmapError::Data("network spec header too large".into()));
    }
    let mut spec_buf = vec![0u8; spec_len];
    r.read_exact(&mut spec_buf)?;
    let spec: NetworkSpec = serde_json::from_slice(&spec_buf)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let count = u64::from_le_bytes(len8) as usize;
    let weights = read_f32s(&mut r, count)?;
    let mut net: Network<f32> = init_network(&spec)?;
    if net.weights.len() != count {
        return Err(QmapError::Data(format!(
            "weight count {count} does not match spec ({})",
            net.weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(QmapError::Data("non-finite weight in file".into()));
    }
    net.weights = weights;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn tiny_resconv_spec(seed: u64) -> NetworkSpec {
        let mut spec = NetworkSpec::resconv(
            ModelKind::Dti,
            QmatrixConfig { q_n: 8, ..QmatrixConfig::dti_default() },
            seed,
        );
        spec.conv_channels = 4;
        spec.dense_width = 8;
        spec
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a: Network<f32> = init_network(&tiny_resconv_spec(5)).unwrap();
        let b: Network<f32> = init_network(&tiny_resconv_spec(5)).unwrap();
        let c: Network<f32> = init_network(&tiny_resconv_spec(6)).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn xavier_variance_matches_definition() {
        // dense 100 -> 120: 12000 weights, var ~ 2/(100+120)
        let spec = NetworkSpec {
            kind: NetKind::Mlp,
            model: ModelKind::Dti,
            input: InputKind::Signals { len: 100 },
            output_dim: 4,
            seed: 9,
            conv_channels: 0,
            res_blocks: 0,
            dense_width: 0,
            mlp_hidden: vec![120],
            output_scale: vec![1.0; 4],
            qmatrix: None,
        };
        let net: Network<f64> = init_network(&spec).unwrap();
        let n_w = 100 * 120;
        let ws = &net.weights[..n_w];
        let mean: f64 = ws.iter().sum::<f64>() / n_w as f64;
        let var: f64 = ws.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n_w as f64;
        let want = 2.0 / (100.0 + 120.0);
        assert!((var - want).abs() < 0.1 * want, "var {var} vs {want}");
        // biases zero
        assert!(net.weights[n_w..n_w + 120].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn mlp_layer_sizes_match_baseline() {
        let net: Network<f32> = init_network(&NetworkSpec::mlp(ModelKind::Dti, 1)).unwrap();
        let dense: Vec<(usize, usize)> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { inp, out } => Some((*inp, *out)),
                _ => None,
            })
            .collect();
        assert_eq!(dense, vec![(32, 256), (256, 256), (256, 256), (256, 4)]);

        let net: Network<f32> = init_network(&NetworkSpec::mlp(ModelKind::Noddi, 1)).unwrap();
        let dense: Vec<(usize, usize)> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { inp, out } => Some((*inp, *out)),
                _ => None,
            })
            .collect();
        assert_eq!(dense, vec![(104, 400), (400, 400), (400, 400), (400, 3)]);
    }

    #[test]
    fn resconv_first_kernel_is_seven() {
        let net: Network<f32> = init_network(&NetworkSpec::resconv(
            ModelKind::Dti,
            QmatrixConfig::dti_default(),
            1,
        ))
        .unwrap();
        match net.layers()[0] {
            LayerSpec::Conv2d(g) => {
                assert_eq!(g.k, 7);
                assert_eq!(g.out_ch, 32);
            }
            _ => panic!("first layer must be a convolution"),
        }
        let spec3d = NetworkSpec::resconv(
            ModelKind::Dti,
            QmatrixConfig {
                variant: QmatrixVariant::ThreeD,
                ..QmatrixConfig::dti_default()
            },
            1,
        );
        let net: Network<f32> = init_network(&spec3d).unwrap();
        match net.layers()[0] {
            LayerSpec::Conv3d(g) => assert_eq!(g.k, 7),
            _ => panic!("first layer must be a 3D convolution"),
        }
    }

    #[test]
    fn all_zero_input_yields_finite_output() {
        let net: Network<f32> = init_network(&tiny_resconv_spec(3)).unwrap();
        let x = Tensor::Spatial(ArrayD::zeros(IxDyn(&[1, 3, 8, 8])));
        let y = net.forward_batch(&x).unwrap();
        assert_eq!(y.dim(), (1, 4));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_forward_equals_single_forward() {
        let net: Network<f32> = init_network(&tiny_resconv_spec(8)).unwrap();
        let mut rng = crate::math::stream_rng(21, 0);
        let rows = Array2::from_shape_fn((5, 8 * 8 * 3), |_| rng.random::<f32>());
        let batch = net.batch_from_rows(&rows).unwrap();
        let all = net.forward_batch(&batch).unwrap();
        for i in 0..5 {
            let one_rows = rows.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let single = net
                .forward_batch(&net.batch_from_rows(&one_rows).unwrap())
                .unwrap();
            for c in 0..4 {
                let d = (all[(i, c)] - single[(0, c)]).abs();
                assert!(d <= 1e-6 * single[(0, c)].abs().max(1.0), "sample {i} ch {c}");
            }
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.qnet");
        let net: Network<f32> = init_network(&tiny_resconv_spec(12)).unwrap();
        save_network(&path, &net).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(back.spec, net.spec);
        assert_eq!(back.weights, net.weights);
    }

    #[test]
    fn qmatrix3d_rows_round_trip_shape() {
        let mut spec = NetworkSpec::resconv(
            ModelKind::Dti,
            QmatrixConfig {
                q_n: 6,
                variant: QmatrixVariant::ThreeD,
                ..QmatrixConfig::dti_default()
            },
            2,
        );
        spec.conv_channels = 3;
        spec.dense_width = 5;
        let net: Network<f32> = init_network(&spec).unwrap();
        let rows = Array2::from_elem((2, 216), 0.5f32);
        let y = net
            .forward_batch(&net.batch_from_rows(&rows).unwrap())
            .unwrap();
        assert_eq!(y.dim(), (2, 4));
    }

    /// Central finite differences against analytic gradients on small f64
    /// nets covering every layer type.
    fn grad_check(spec: &NetworkSpec, input_shape: &[usize]) -> f64 {
        let mut net: Network<f64> = init_network(spec).unwrap();
        let mut rng = crate::math::stream_rng(100, 0);
        let x = if input_shape.len() == 2 {
            Tensor::Flat(Array2::from_shape_fn(
                (input_shape[0], input_shape[1]),
                |_| rng.random::<f64>() - 0.5,
            ))
        } else {
            Tensor::Spatial(ArrayD::from_shape_fn(IxDyn(input_shape), |_| {
                rng.random::<f64>() - 0.5
            }))
        };
        let n = input_shape[0];
        let targets = Array2::from_shape_fn((n, spec.output_dim), |_| rng.random::<f64>());

        let loss = |net: &Network<f64>| -> f64 {
            let y = net.forward_batch(&x).unwrap();
            let mut s = 0.0;
            for (a, b) in y.iter().zip(targets.iter()) {
                s += (a - b) * (a - b);
            }
            s / (y.len() as f64)
        };

        let (y, caches) = net.forward_cached(&x).unwrap();
        let m = y.len() as f64;
        let dout = (y - &targets) * (2.0 / m);
        let grads = net.backward(&caches, dout).unwrap();

        // the 1e-6 floor keeps finite-difference roundoff (~1e-11 here) from
        // inflating the ratio on near-zero gradients
        let mut worst: f64 = 0.0;
        for i in 0..net.weights.len() {
            let h = 1e-6 * net.weights[i].abs().max(1.0);
            let orig = net.weights[i];
            net.weights[i] = orig + h;
            let lp = loss(&net);
            net.weights[i] = orig - h;
            let lm = loss(&net);
            net.weights[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max((fd - grads[i]).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_resconv2d() {
        let mut spec = tiny_resconv_spec(40);
        spec.conv_channels = 3;
        spec.dense_width = 4;
        spec.res_blocks = 1;
        spec.input = InputKind::Qmatrix2d { q_n: 6, channels: 2 };
        let err = grad_check(&spec, &[2, 2, 6, 6]);
        assert!(err < 1e-4, "relative gradient error {err}");
    }

    #[test]
    fn gradients_match_finite_differences_resconv3d() {
        let mut spec = tiny_resconv_spec(41);
        spec.input = InputKind::Qmatrix3d { q_n: 5 };
        spec.conv_channels = 2;
        spec.dense_width = 3;
        spec.res_blocks = 1;
        let err = grad_check(&spec, &[1, 1, 5, 5, 5]);
        assert!(err < 1e-4, "relative gradient error {err}");
    }

    #[test]
    fn gradients_match_finite_differences_mlp() {
        let spec = NetworkSpec {
            kind: NetKind::Mlp,
            model: ModelKind::Dti,
            input: InputKind::Signals { len: 7 },
            output_dim: 3,
            seed: 42,
            conv_channels: 0,
            res_blocks: 0,
            dense_width: 0,
            mlp_hidden: vec![9, 5],
            output_scale: vec![1.0; 3],
            qmatrix: None,
        };
        let err = grad_check(&spec, &[3, 7]);
        assert!(err < 1e-4, "relative gradient error {err}");
    }
}
