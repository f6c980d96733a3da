//! Experiment orchestration: generate -> train -> infer -> evaluate, driven
//! by a JSON config. Covers the quantization sweep, the two-scheme
//! generalization runs, and the scheme-locked baseline contrast.

use crate::error::{QmapError, Result};
use crate::fit::{dti_scalars, eig_sym3, fit_dti_lls, fit_noddi, NoddiGridSpec};
use crate::forward::dataset::{encode_dataset, encode_signal_dataset, simulate_samples};
use crate::forward::{
    dti_signal, mc_simulate, noddi_signal, sample_dti_tensor, sample_noddi_params, SignalSet,
    SimConfig, TissueModel,
};
use crate::harness::{nrmse, wilcoxon_rank_sum};
use crate::io::{write_volume, Volume};
use crate::math::stream_rng;
use crate::qmatrix::{QmatrixConfig, QmatrixVariant};
use crate::regressor::{infer_volume, init_network, train, Network, NetworkSpec, TrainConfig};
use crate::scheme::{parse_scheme, GradientScheme};
use crate::ModelKind;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use crate::regressor::NetKind;

/// How phantom signals are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignalSource {
    /// Analytic forward model plus complex Gaussian noise.
    #[default]
    Analytic,
    /// Full Monte-Carlo simulation.
    Mc,
}

/// Reference maps the NRMSE is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefSource {
    /// Conventional fit of the noisy phantom signals (the in-vivo analogue).
    Fit,
    /// Ground-truth parameter maps.
    Truth,
}

fn default_batch() -> usize {
    100
}
fn default_epochs() -> usize {
    10
}
fn default_lr0() -> f64 {
    1e-3
}
fn default_decay() -> f64 {
    0.87
}
fn default_qn() -> usize {
    20
}
fn default_protons() -> usize {
    10_000
}
fn default_phantoms() -> usize {
    5
}
fn default_voxels() -> usize {
    1024
}

/// Training stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStage {
    pub n_samples: usize,
    #[serde(default = "default_protons")]
    pub n_protons: usize,
    /// SNR range sampled per training example; null = noise-free.
    #[serde(default)]
    pub snr: Option<(f64, f64)>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_qn")]
    pub q_n: usize,
    #[serde(default)]
    pub variant: Option<QmatrixVariant>,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
}

/// One network to train and evaluate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetChoice {
    pub kind: NetKind,
    /// Fixed acquisition scheme (required for the MLP baseline).
    #[serde(default)]
    pub scheme_file: Option<String>,
}

/// One synthetic test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStage {
    pub name: String,
    pub scheme_file: String,
    #[serde(default = "default_voxels")]
    pub n_voxels: usize,
    #[serde(default)]
    pub snr: Option<f64>,
    #[serde(default = "default_phantoms")]
    pub n_phantoms: usize,
    #[serde(default)]
    pub reference: Option<RefSource>,
    #[serde(default)]
    pub signal_source: SignalSource,
}

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelKind,
    pub out_dir: PathBuf,
    pub train: TrainStage,
    pub nets: Vec<NetChoice>,
    /// When set, the train/eval cycle repeats per quantization size.
    #[serde(default)]
    pub qn_list: Option<Vec<usize>>,
    pub evals: Vec<EvalStage>,
}

/// Mean and standard deviation across phantoms, with the raw values echoed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanStd { mean, std: var.sqrt(), values }
    }
}

/// One (net, q_n, eval) result row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub net: NetKind,
    pub q_n: usize,
    pub eval: String,
    pub per_param: BTreeMap<String, MeanStd>,
    /// Mean over parameters of the per-parameter mean NRMSE (%).
    pub mean_nrmse: f64,
}

/// Experiment output: one row per (net, q_n, eval), stage timings, and the
/// config echo (seeds included).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    /// Two-sided rank-sum p-values between the first two nets, keyed as
    /// "eval/param"; present only when two nets were run.
    pub rank_sum_p: BTreeMap<String, f64>,
    pub timings_s: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

/// A synthetic test object: per-voxel ground truths, noisy signals, and the
/// reference maps the predictions are scored against.
pub struct Phantom {
    pub scheme: GradientScheme,
    pub signals: Volume,
    pub truth: Volume,
    pub reference: Volume,
}

/// Adds complex Gaussian noise at `snr` and normalizes by the mean of
/// max(1, n_b0) noisy b=0 magnitudes, matching the simulator's convention.
fn apply_snr_noise<R: Rng + ?Sized>(clean: &[f64], snr: f64, n_b0: usize, rng: &mut R) -> Vec<f64> {
    let sigma = 1.0 / snr;
    let noisy: Vec<f64> = clean
        .iter()
        .map(|&s| {
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            (s + sigma * nr).hypot(sigma * ni)
        })
        .collect();
    let n_b0 = n_b0.max(1);
    let b0: f64 = (0..n_b0)
        .map(|_| {
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            (1.0 + sigma * nr).hypot(sigma * ni)
        })
        .sum::<f64>()
        / n_b0 as f64;
    noisy.into_iter().map(|v| v / b0).collect()
}

/// Builds a flat (n_voxels, 1, 1) phantom with per-voxel random tissue.
pub fn make_phantom(
    model: ModelKind,
    scheme: &GradientScheme,
    n_voxels: usize,
    snr: Option<f64>,
    source: SignalSource,
    reference: RefSource,
    n_protons: usize,
    seed: u64,
) -> Result<Phantom> {
    let n_dw = scheme.n_dw();
    let mut signals = Volume::new(
        [n_voxels, 1, 1, n_dw],
        (0..n_dw).map(|i| format!("g{i:03}")).collect(),
        None,
    )?;
    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    let mut truth_vol = Volume::new([n_voxels, 1, 1, names.len()], names.clone(), Some(model))?;
    let mut ref_vol = Volume::new([n_voxels, 1, 1, names.len()], names, Some(model))?;

    let rows: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..n_voxels)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream_rng(seed, v as u64);
            let (truth_params, clean): (Vec<f64>, Vec<f64>) = match model {
                ModelKind::Dti => {
                    let t = sample_dti_tensor(&mut rng);
                    let eig = eig_sym3(&t.tensor_elements());
                    let s = dti_scalars(eig.values[0], eig.values[1], eig.values[2]);
                    let clean = scheme
                        .dw_entries()
                        .map(|e| dti_signal(&t, e.b, e.dir))
                        .collect();
                    (vec![s.fa, s.md, s.ad, s.rd], clean)
                }
                ModelKind::Noddi => {
                    let t = sample_noddi_params(&mut rng);
                    let clean: Result<Vec<f64>> = scheme
                        .dw_entries()
                        .map(|e| noddi_signal(&t, e.b, e.dir, 48))
                        .collect();
                    (vec![t.icvf, t.isovf, t.odi], clean?)
                }
            };
            let measured = match (source, snr) {
                (SignalSource::Analytic, None) => clean.clone(),
                (SignalSource::Analytic, Some(snr)) => {
                    apply_snr_noise(&clean, snr, scheme.n_b0(), &mut rng)
                }
                (SignalSource::Mc, _) => {
                    let base = match model {
                        ModelKind::Dti => SimConfig::desk_dti(),
                        ModelKind::Noddi => SimConfig::desk_noddi(),
                    };
                    let cfg = base.with_protons(n_protons).with_snr(snr);
                    let tissue = match model {
                        ModelKind::Dti => TissueModel::Dti(sample_dti_tensor(
                            &mut stream_rng(seed, v as u64),
                        )),
                        ModelKind::Noddi => TissueModel::Noddi(sample_noddi_params(
                            &mut stream_rng(seed, v as u64),
                        )),
                    };
                    mc_simulate(&tissue, scheme, &cfg, &mut rng)?.values
                }
            };
            let reference_params = match reference {
                RefSource::Truth => truth_params.clone(),
                RefSource::Fit => match model {
                    ModelKind::Dti => {
                        let sig = SignalSet { values: measured.clone() };
                        let fit = fit_dti_lls(&sig, scheme)?;
                        let eig = eig_sym3(&fit.tensor);
                        let s = dti_scalars(eig.values[0], eig.values[1], eig.values[2]);
                        vec![s.fa, s.md, s.ad, s.rd]
                    }
                    ModelKind::Noddi => {
                        let sig = SignalSet { values: measured.clone() };
                        let fit = fit_noddi(&sig, scheme, &NoddiGridSpec::default(), 50)?;
                        vec![fit.icvf, fit.isovf, fit.odi]
                    }
                },
            };
            Ok((truth_params, measured, reference_params))
        })
        .collect();

    for (v, row) in rows.into_iter().enumerate() {
        let (truth_params, measured, reference_params) = row?;
        for (c, &x) in truth_params.iter().enumerate() {
            let i = truth_vol.index(v, 0, 0, c);
            truth_vol.data[i] = x as f32;
        }
        for (c, &x) in measured.iter().enumerate() {
            let i = signals.index(v, 0, 0, c);
            signals.data[i] = x as f32;
        }
        for (c, &x) in reference_params.iter().enumerate() {
            let i = ref_vol.index(v, 0, 0, c);
            ref_vol.data[i] = x as f32;
        }
    }
    Ok(Phantom {
        scheme: scheme.clone(),
        signals,
        truth: truth_vol,
        reference: ref_vol,
    })
}

/// Per-parameter NRMSE (%) of predicted maps against reference maps.
pub fn volume_nrmse(pred: &Volume, reference: &Volume, mask: Option<&Volume>) -> Result<BTreeMap<String, f64>> {
    if pred.shape != reference.shape {
        return Err(QmapError::Shape("prediction/reference shape mismatch".into()));
    }
    let mask_vec: Option<Vec<bool>> = mask.map(|m| {
        (0..m.n_voxels()).map(|v| m.voxel(v)[0] != 0.0).collect()
    });
    let mut out = BTreeMap::new();
    let n_vox = pred.n_voxels();
    for (c, name) in pred.params.iter().enumerate() {
        let p: Vec<f64> = (0..n_vox).map(|v| pred.voxel(v)[c] as f64).collect();
        let r: Vec<f64> = (0..n_vox).map(|v| reference.voxel(v)[c] as f64).collect();
        out.insert(name.clone(), nrmse(&p, &r, mask_vec.as_deref())?);
    }
    Ok(out)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = PathBuf::from(rel);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn load_scheme(path: &Path) -> Result<GradientScheme> {
    parse_scheme(&std::fs::read_to_string(path)?)
}

/// Runs the full declared pipeline and writes `report.json` plus the
/// first-replicate parameter maps under the config's `out_dir`.
pub fn run_experiment(config_path: &Path) -> Result<EvalReport> {
    let cfg: ExperimentConfig = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(config_path)
            .map_err(|e| QmapError::Config(format!("cannot open config: {e}")))?,
    ))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let out_dir = resolve(base, cfg.out_dir.to_str().unwrap_or("."));
    std::fs::create_dir_all(&out_dir)?;

    if cfg.nets.is_empty() || cfg.evals.is_empty() {
        return Err(QmapError::Config("need at least one net and one eval".into()));
    }

    let sim_base = match cfg.model {
        ModelKind::Dti => SimConfig::desk_dti(),
        ModelKind::Noddi => SimConfig::desk_noddi(),
    };
    let sim = sim_base.with_protons(cfg.train.n_protons);
    let variant = cfg.train.variant.unwrap_or(QmatrixVariant::TwoD);
    let qn_list = cfg.qn_list.clone().unwrap_or_else(|| vec![cfg.train.q_n]);

    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut rows: Vec<ReportRow> = Vec::new();

    // random-scheme raw samples are shared by every resconv run
    let needs_random = cfg.nets.iter().any(|n| n.kind == NetKind::ResConv);
    let t0 = Instant::now();
    let random_raw = if needs_random {
        Some(simulate_samples(
            cfg.model,
            cfg.train.n_samples,
            &sim,
            cfg.train.snr,
            None,
            cfg.seed,
        )?)
    } else {
        None
    };
    timings.insert("gen_random_schemes".into(), t0.elapsed().as_secs_f64());

    for (net_idx, choice) in cfg.nets.iter().enumerate() {
        match choice.kind {
            NetKind::ResConv => {
                let raw = random_raw.as_ref().expect("generated above");
                for &q_n in &qn_list {
                    let q_cfg = QmatrixConfig {
                        q_n,
                        variant,
                        b_norm: match cfg.model {
                            ModelKind::Dti => crate::forward::DTI_B_NORM,
                            ModelKind::Noddi => crate::forward::NODDI_B_NORM,
                        },
                        per_shell: cfg.model == ModelKind::Noddi
                            && variant == QmatrixVariant::TwoD,
                        mirror: true,
                    };
                    let t = Instant::now();
                    let ds = encode_dataset(raw, cfg.model, &q_cfg)?;
                    timings.insert(format!("encode_qn{q_n}"), t.elapsed().as_secs_f64());

                    let spec = NetworkSpec::resconv(cfg.model, q_cfg, cfg.seed ^ 0xABCD);
                    let mut net: Network<f32> = init_network(&spec)?;
                    let tc = TrainConfig {
                        batch: cfg.train.batch,
                        lr0: cfg.train.lr0,
                        decay: cfg.train.decay,
                        epochs: cfg.train.epochs,
                        seed: cfg.seed ^ 0x7131,
                        ..Default::default()
                    };
                    let t = Instant::now();
                    train(&mut net, &ds, &tc)?;
                    timings.insert(format!("train_resconv_qn{q_n}"), t.elapsed().as_secs_f64());
                    crate::regressor::save_network(
                        &out_dir.join(format!("resconv_qn{q_n}.qnet")),
                        &net,
                    )?;
                    evaluate_net(&cfg, &net, q_n, base, &out_dir, &mut rows, &mut timings)?;
                }
            }
            NetKind::Mlp => {
                let scheme_rel = choice.scheme_file.as_ref().ok_or_else(|| {
                    QmapError::Config("mlp net requires a scheme_file".into())
                })?;
                let scheme = load_scheme(&resolve(base, scheme_rel))?;
                let t = Instant::now();
                let raw = simulate_samples(
                    cfg.model,
                    cfg.train.n_samples,
                    &sim,
                    cfg.train.snr,
                    Some(&scheme),
                    cfg.seed ^ (net_idx as u64 + 1),
                )?;
                timings.insert("gen_fixed_scheme".into(), t.elapsed().as_secs_f64());
                let spec = NetworkSpec::mlp(cfg.model, cfg.seed ^ 0xBEEF);
                let input_len = spec.input.flat_len();
                let ds = encode_signal_dataset(&raw, cfg.model, input_len)?;
                let mut net: Network<f32> = init_network(&spec)?;
                let tc = TrainConfig {
                    batch: cfg.train.batch,
                    lr0: cfg.train.lr0,
                    decay: cfg.train.decay,
                    epochs: cfg.train.epochs,
                    seed: cfg.seed ^ 0x7132,
                    ..Default::default()
                };
                let t = Instant::now();
                train(&mut net, &ds, &tc)?;
                timings.insert("train_mlp".into(), t.elapsed().as_secs_f64());
                crate::regressor::save_network(&out_dir.join("mlp.qnet"), &net)?;
                evaluate_net(&cfg, &net, 0, base, &out_dir, &mut rows, &mut timings)?;
            }
        }
    }

    // paired statistics when exactly two nets ran on the same evals
    let mut rank_sum_p = BTreeMap::new();
    if cfg.nets.len() == 2 {
        let kinds: Vec<NetKind> = cfg.nets.iter().map(|n| n.kind).collect();
        for ev in &cfg.evals {
            let find = |kind: NetKind| {
                rows.iter()
                    .find(|r| r.net == kind && r.eval == ev.name)
                    .map(|r| &r.per_param)
            };
            if let (Some(a), Some(b)) = (find(kinds[0]), find(kinds[1])) {
                for (param, ms_a) in a {
                    if let Some(ms_b) = b.get(param) {
                        if ms_a.values.len() > 1 {
                            let t = wilcoxon_rank_sum(&ms_a.values, &ms_b.values)?;
                            rank_sum_p.insert(format!("{}/{}", ev.name, param), t.p);
                        }
                    }
                }
            }
        }
    }

    let report = EvalReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        rows,
        rank_sum_p,
        timings_s: timings,
        config: serde_json::to_value(&cfg)?,
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("report.json"))?),
        &report,
    )?;
    Ok(report)
}

fn evaluate_net(
    cfg: &ExperimentConfig,
    net: &Network<f32>,
    q_n: usize,
    base: &Path,
    out_dir: &Path,
    rows: &mut Vec<ReportRow>,
    timings: &mut BTreeMap<String, f64>,
) -> Result<()> {
    for (eval_idx, ev) in cfg.evals.iter().enumerate() {
        let scheme = load_scheme(&resolve(base, &ev.scheme_file))?;
        let reference = ev.reference.unwrap_or(match cfg.model {
            ModelKind::Dti => RefSource::Fit,
            ModelKind::Noddi => RefSource::Truth,
        });
        let t = Instant::now();
        let mut per_param_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for rep in 0..ev.n_phantoms.max(1) {
            // phantom seeds depend only on (experiment seed, eval, rep), so
            // every net scores against identical phantoms
            let phantom_seed = cfg
                .seed
                .wrapping_mul(0x9E3779B97F4A7C15)
                .wrapping_add((eval_idx as u64) << 32)
                .wrapping_add(rep as u64);
            let phantom = make_phantom(
                cfg.model,
                &scheme,
                ev.n_voxels,
                ev.snr,
                ev.signal_source,
                reference,
                cfg.train.n_protons,
                phantom_seed,
            )?;
            let pred = infer_volume(net, &phantom.signals, &scheme, None)?;
            if rep == 0 {
                let tag = format!("{:?}_qn{}_{}", net.spec.kind, q_n, ev.name).to_lowercase();
                write_volume(&out_dir.join(format!("{tag}_pred.qvol")), &pred)?;
                write_volume(&out_dir.join(format!("{tag}_ref.qvol")), &phantom.reference)?;
                write_volume(&out_dir.join(format!("{tag}_truth.qvol")), &phantom.truth)?;
            }
            for (param, v) in volume_nrmse(&pred, &phantom.reference, None)? {
                per_param_values.entry(param).or_default().push(v);
            }
        }
        let per_param: BTreeMap<String, MeanStd> = per_param_values
            .into_iter()
            .map(|(k, v)| (k, MeanStd::from_values(v)))
            .collect();
        let mean_nrmse =
            per_param.values().map(|m| m.mean).sum::<f64>() / per_param.len() as f64;
        timings.insert(
            format!("eval_{}_{:?}_qn{q_n}", ev.name, net.spec.kind).to_lowercase(),
            t.elapsed().as_secs_f64(),
        );
        rows.push(ReportRow {
            label: format!("{:?}/qn={q_n}/{}", net.spec.kind, ev.name).to_lowercase(),
            net: net.spec.kind,
            q_n,
            eval: ev.name.clone(),
            per_param,
            mean_nrmse,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::fibonacci_sphere;
    use crate::scheme::SchemeEntry;

    fn small_scheme() -> GradientScheme {
        GradientScheme::new(
            fibonacci_sphere(16)
                .into_iter()
                .map(|dir| SchemeEntry { b: 800.0, dir })
                .collect(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn phantom_reference_fit_is_consistent_noise_free() {
        let scheme = small_scheme();
        let ph = make_phantom(
            ModelKind::Dti,
            &scheme,
            32,
            None,
            SignalSource::Analytic,
            RefSource::Fit,
            0,
            77,
        )
        .unwrap();
        // noise-free: fit reference equals the ground truth maps
        for v in 0..32 {
            for c in 0..4 {
                let t = ph.truth.voxel(v)[c];
                let r = ph.reference.voxel(v)[c];
                assert!((t - r).abs() < 1e-5, "voxel {v} ch {c}: {t} vs {r}");
            }
        }
    }

    #[test]
    fn phantom_is_deterministic() {
        let scheme = small_scheme();
        let a = make_phantom(
            ModelKind::Dti, &scheme, 8, Some(40.0), SignalSource::Analytic, RefSource::Fit, 0, 5,
        )
        .unwrap();
        let b = make_phantom(
            ModelKind::Dti, &scheme, 8, Some(40.0), SignalSource::Analytic, RefSource::Fit, 0, 5,
        )
        .unwrap();
        assert_eq!(a.signals, b.signals);
        assert_eq!(a.reference, b.reference);
    }

    #[test]
    fn volume_nrmse_zero_for_identical_maps() {
        let scheme = small_scheme();
        let ph = make_phantom(
            ModelKind::Dti, &scheme, 8, None, SignalSource::Analytic, RefSource::Truth, 0, 9,
        )
        .unwrap();
        let m = volume_nrmse(&ph.truth, &ph.truth, None).unwrap();
        for (_, v) in m {
            assert_eq!(v, 0.0);
        }
    }
}
