//! Training-set generation: sample ground truths, run the Monte-Carlo
//! simulator, encode network inputs, and attach labels.
//!
//! DTI labels are the conventional-fit scalars computed from the noise-free
//! analytic signals of the drawn tensor; NODDI labels are the ground-truth
//! fractions. Diffusivity labels are stored in 1e-3 mm^2/s so every label
//! is O(1) for training.

use crate::error::{QmapError, Result};
use crate::fit::{dti_scalars, eig_sym3, fit_dti_lls};
use crate::forward::mc::{mc_simulate, SimConfig, TissueModel};
use crate::forward::{
    dti_signal, sample_dti_tensor, sample_dti_truth, sample_noddi_params, sample_noddi_truth,
    SignalSet, DTI_B_RANGE, DTI_N_RANGE,
};
use crate::io::{write_dataset, Dataset, DatasetLayout, DatasetMeta};
use crate::math::stream_rng;
use crate::qmatrix::{encode, QmatrixConfig};
use crate::scheme::{group_shells, normalize_qpoints, GradientScheme, SHELL_TOLERANCE};
use crate::ModelKind;
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::path::Path;

/// Diffusivity scale applied to training labels (mm^2/s -> 1e-3 mm^2/s).
pub const LABEL_DIFF_SCALE: f64 = 1e3;

/// One simulated acquisition: the scheme it was measured with, the noisy
/// normalized signals, and the training label.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub scheme: GradientScheme,
    pub signals: SignalSet,
    pub label: Vec<f64>,
}

/// Draws `n` (truth, scheme) pairs, simulates noisy signals, and computes
/// labels. When `fixed_scheme` is given every sample uses it (the prior
/// still drives the tissue draw). SNR is drawn per sample from `snr_range`;
/// `None` simulates noise-free. Deterministic in `seed` and independent of
/// worker count.
pub fn simulate_samples(
    model: ModelKind,
    n: usize,
    sim: &SimConfig,
    snr_range: Option<(f64, f64)>,
    fixed_scheme: Option<&GradientScheme>,
    seed: u64,
) -> Result<Vec<RawSample>> {
    if n == 0 {
        return Err(QmapError::Config("n_samples must be >= 1".into()));
    }
    if let Some((lo, hi)) = snr_range {
        if !(lo > 0.0 && hi >= lo) {
            return Err(QmapError::Config(format!("bad snr range {lo}:{hi}")));
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let snr = snr_range.map(|(lo, hi)| rng.random_range(lo..=hi));
            let cfg = sim.with_snr(snr);
            match model {
                ModelKind::Dti => {
                    let (truth, scheme) = match fixed_scheme {
                        Some(s) => (sample_dti_tensor(&mut rng), s.clone()),
                        None => sample_dti_truth(&mut rng, DTI_B_RANGE, DTI_N_RANGE),
                    };
                    // label: conventional fit of the noise-free analytic signals
                    let clean = SignalSet {
                        values: scheme
                            .dw_entries()
                            .map(|e| dti_signal(&truth, e.b, e.dir))
                            .collect(),
                    };
                    let fit = fit_dti_lls(&clean, &scheme)?;
                    let eig = eig_sym3(&fit.tensor);
                    let s = dti_scalars(eig.values[0], eig.values[1], eig.values[2]);
                    let label = vec![
                        s.fa,
                        s.md * LABEL_DIFF_SCALE,
                        s.ad * LABEL_DIFF_SCALE,
                        s.rd * LABEL_DIFF_SCALE,
                    ];
                    let signals = mc_simulate(&TissueModel::Dti(truth), &scheme, &cfg, &mut rng)?;
                    Ok(RawSample { scheme, signals, label })
                }
                ModelKind::Noddi => {
                    let (truth, scheme) = match fixed_scheme {
                        Some(s) => (sample_noddi_params(&mut rng), s.clone()),
                        None => sample_noddi_truth(&mut rng),
                    };
                    let label = vec![truth.icvf, truth.isovf, truth.odi];
                    let signals = mc_simulate(&TissueModel::Noddi(truth), &scheme, &cfg, &mut rng)?;
                    Ok(RawSample { scheme, signals, label })
                }
            }
        })
        .collect()
}

/// Encodes raw samples into a Qmatrix dataset.
pub fn encode_dataset(
    samples: &[RawSample],
    model: ModelKind,
    q_cfg: &QmatrixConfig,
) -> Result<Dataset> {
    if samples.is_empty() {
        return Err(QmapError::Config("no samples to encode".into()));
    }
    let rows: Vec<(Vec<f32>, Vec<f32>)> = samples
        .par_iter()
        .map(|s| {
            let qpoints = normalize_qpoints(&s.scheme, q_cfg.b_norm)?;
            let shells = if q_cfg.per_shell {
                Some(group_shells(&s.scheme, SHELL_TOLERANCE)?)
            } else {
                None
            };
            let qm = encode(&qpoints, &s.signals.values, q_cfg, shells.as_ref())?;
            let input: Vec<f32> = qm.data.iter().map(|&v| v as f32).collect();
            let label: Vec<f32> = s.label.iter().map(|&v| v as f32).collect();
            Ok((input, label))
        })
        .collect::<Result<_>>()?;

    let channels = rows[0].0.len() / (q_cfg.q_n * q_cfg.q_n);
    let label_dim = rows[0].1.len();
    to_dataset(
        rows,
        model,
        DatasetLayout::Qmatrix {
            q_n: q_cfg.q_n,
            channels,
            variant: q_cfg.variant,
        },
        label_dim,
    )
}

/// Encodes raw samples as zero-padded signal vectors (the scheme-locked
/// baseline input). Errors when a sample has more signals than `input_len`.
pub fn encode_signal_dataset(
    samples: &[RawSample],
    model: ModelKind,
    input_len: usize,
) -> Result<Dataset> {
    if samples.is_empty() {
        return Err(QmapError::Config("no samples to encode".into()));
    }
    let rows: Vec<(Vec<f32>, Vec<f32>)> = samples
        .iter()
        .map(|s| {
            if s.signals.len() > input_len {
                return Err(QmapError::Shape(format!(
                    "{} signals exceed the padded input length {input_len}",
                    s.signals.len()
                )));
            }
            let mut input = vec![0.0f32; input_len];
            for (dst, &v) in input.iter_mut().zip(&s.signals.values) {
                *dst = v as f32;
            }
            Ok((input, s.label.iter().map(|&v| v as f32).collect()))
        })
        .collect::<Result<_>>()?;
    let label_dim = rows[0].1.len();
    to_dataset(rows, model, DatasetLayout::Signals { input_len }, label_dim)
}

fn to_dataset(
    rows: Vec<(Vec<f32>, Vec<f32>)>,
    model: ModelKind,
    layout: DatasetLayout,
    label_dim: usize,
) -> Result<Dataset> {
    let n = rows.len();
    let in_len = layout.input_len();
    let mut inputs = Vec::with_capacity(n * in_len);
    let mut labels = Vec::with_capacity(n * label_dim);
    for (i, l) in rows {
        if i.len() != in_len || l.len() != label_dim {
            return Err(QmapError::Shape("inconsistent sample shapes".into()));
        }
        inputs.extend(i);
        labels.extend(l);
    }
    Ok(Dataset {
        model,
        layout,
        inputs: Array2::from_shape_vec((n, in_len), inputs)
            .map_err(|e| QmapError::Shape(e.to_string()))?,
        labels: Array2::from_shape_vec((n, label_dim), labels)
            .map_err(|e| QmapError::Shape(e.to_string()))?,
    })
}

fn priors_echo(model: ModelKind) -> serde_json::Value {
    match model {
        ModelKind::Dti => serde_json::json!({
            "d1_max_mm2_per_s": crate::forward::D1_MAX,
            "b_range_s_per_mm2": DTI_B_RANGE,
            "n_directions": DTI_N_RANGE,
        }),
        ModelKind::Noddi => serde_json::json!({
            "fractions": "icvf, isovf, odi ~ U(0,1)",
            "d_par_mm2_per_s": crate::forward::D_PAR,
            "d_iso_mm2_per_s": crate::forward::D_ISO,
            "shell_b_ranges": crate::forward::NODDI_B_RANGES,
            "shell_n_ranges": crate::forward::NODDI_N_RANGES,
        }),
    }
}

/// Full generation pipeline: simulate, encode, write container + sidecar.
/// Returns the in-memory dataset.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    model: ModelKind,
    n: usize,
    sim: &SimConfig,
    snr_range: Option<(f64, f64)>,
    q_cfg: &QmatrixConfig,
    seed: u64,
    out: &Path,
) -> Result<Dataset> {
    let samples = simulate_samples(model, n, sim, snr_range, None, seed)?;
    let ds = encode_dataset(&samples, model, q_cfg)?;
    let meta = DatasetMeta {
        model,
        seed,
        sim: *sim,
        snr_range,
        qmatrix: Some(*q_cfg),
        fixed_scheme: None,
        priors: priors_echo(model),
    };
    write_dataset(out, &ds, &meta)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmatrix::QmatrixVariant;

    fn quick_sim() -> SimConfig {
        SimConfig::desk_dti().with_protons(200)
    }

    #[test]
    fn rejects_zero_samples() {
        assert!(simulate_samples(ModelKind::Dti, 0, &quick_sim(), None, None, 1).is_err());
    }

    #[test]
    fn dti_labels_are_bounded_and_scaled() {
        let samples =
            simulate_samples(ModelKind::Dti, 50, &quick_sim(), Some((30.0, 100.0)), None, 42)
                .unwrap();
        for s in &samples {
            assert_eq!(s.label.len(), 4);
            let fa = s.label[0];
            assert!((0.0..=1.0).contains(&fa), "fa {fa}");
            // diffusivities in 1e-3 units: bounded by the prior ceiling 3.5
            for &d in &s.label[1..] {
                assert!((0.0..=3.5 + 1e-9).contains(&d), "diffusivity {d}");
            }
            assert_eq!(s.signals.len(), s.scheme.n_dw());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = simulate_samples(ModelKind::Dti, 8, &quick_sim(), Some((30.0, 100.0)), None, 7)
            .unwrap();
        let b = simulate_samples(ModelKind::Dti, 8, &quick_sim(), Some((30.0, 100.0)), None, 7)
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.signals, y.signals);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn dataset_file_is_byte_identical_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = QmatrixConfig { q_n: 8, ..QmatrixConfig::dti_default() };
        let p1 = dir.path().join("a.qmap");
        let p2 = dir.path().join("b.qmap");
        generate_dataset(ModelKind::Dti, 5, &quick_sim(), Some((30.0, 100.0)), &cfg, 3, &p1)
            .unwrap();
        generate_dataset(ModelKind::Dti, 5, &quick_sim(), Some((30.0, 100.0)), &cfg, 3, &p2)
            .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn noddi_samples_encode_nine_channels() {
        let sim = SimConfig::desk_noddi().with_protons(200);
        let samples =
            simulate_samples(ModelKind::Noddi, 3, &sim, Some((30.0, 100.0)), None, 11).unwrap();
        let cfg = QmatrixConfig { q_n: 10, ..QmatrixConfig::noddi_default() };
        let ds = encode_dataset(&samples, ModelKind::Noddi, &cfg).unwrap();
        match ds.layout {
            DatasetLayout::Qmatrix { q_n, channels, variant } => {
                assert_eq!((q_n, channels, variant), (10, 9, QmatrixVariant::TwoD));
            }
            _ => panic!("expected qmatrix layout"),
        }
        assert_eq!(ds.label_dim(), 3);
        for s in &samples {
            for &l in &s.label {
                assert!((0.0..=1.0).contains(&l));
            }
        }
    }

    #[test]
    fn signal_dataset_pads_and_rejects_overflow() {
        let scheme = crate::scheme::parse_scheme(
            "0 0 0 0\n700 1 0 0\n700 0 1 0\n700 0 0 1\n700 0.707 0.707 0\n700 0.707 0 0.707\n700 0 0.707 0.707\n",
        )
        .unwrap();
        let samples = simulate_samples(
            ModelKind::Dti,
            2,
            &quick_sim(),
            None,
            Some(&scheme),
            5,
        )
        .unwrap();
        let ds = encode_signal_dataset(&samples, ModelKind::Dti, 8).unwrap();
        assert_eq!(ds.inputs.ncols(), 8);
        // last two columns are padding
        for r in 0..2 {
            assert_eq!(ds.inputs[(r, 6)], 0.0);
            assert_eq!(ds.inputs[(r, 7)], 0.0);
        }
        assert!(encode_signal_dataset(&samples, ModelKind::Dti, 4).is_err());
    }
}
