//! qmap command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use clap::{Parser, Subcommand};
use qmap::error::{QmapError, Result};
use qmap::fit::{dti_scalars, eig_sym3, fit_dti_lls, fit_noddi, NoddiGridSpec};
use qmap::forward::{generate_dataset, SignalSet, SimConfig};
use qmap::harness::{nrmse, run_experiment};
use qmap::io::{read_dataset, read_volume, write_volume, write_volume_csv, Volume};
use qmap::qmatrix::{QmatrixConfig, QmatrixVariant};
use qmap::regressor::{
    infer_volume, init_network, load_network, save_network, train, NetKind, NetworkSpec,
    TrainConfig,
};
use qmap::scheme::{condition_number, group_shells, parse_scheme, select_subset, SHELL_TOLERANCE};
use qmap::ModelKind;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "qmap", version, about = "Scheme-agnostic diffusion parameter mapping")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect or subsample gradient schemes.
    Scheme {
        #[command(subcommand)]
        action: SchemeCmd,
    },
    /// Generate a simulated training dataset.
    Gen {
        #[arg(long)]
        model: ModelKind,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Quantization bins per axis.
        #[arg(long)]
        qn: usize,
        /// Qmatrix variant: 2d or 3d.
        #[arg(long)]
        variant: String,
        /// SNR range, e.g. 30:100.
        #[arg(long)]
        snr: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Protons per simulated signal set.
        #[arg(long, default_value_t = 10_000)]
        protons: usize,
    },
    /// Train a regressor on a generated dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// resconv or mlp.
        #[arg(long)]
        net: String,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a trained network to a signal volume.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Conventional model fitting on a signal volume.
    Fit {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        scheme: PathBuf,
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// NRMSE of predicted maps against reference maps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a declared experiment pipeline.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum SchemeCmd {
    /// Shell structure and condition number.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Condition-number-guided per-shell direction subset (prints the
    /// selected scheme).
    Subset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_snr(s: &str) -> Result<Option<(f64, f64)>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || QmapError::Config(format!("bad --snr `{s}`; expected LO:HI or none"));
    match parts.as_slice() {
        [one] => {
            let v: f64 = one.parse().map_err(|_| bad())?;
            Ok(Some((v, v)))
        }
        [lo, hi] => {
            let lo: f64 = lo.parse().map_err(|_| bad())?;
            let hi: f64 = hi.parse().map_err(|_| bad())?;
            Ok(Some((lo, hi)))
        }
        _ => Err(bad()),
    }
}

fn parse_variant(s: &str) -> Result<QmatrixVariant> {
    match s.to_ascii_lowercase().as_str() {
        "2d" => Ok(QmatrixVariant::TwoD),
        "3d" => Ok(QmatrixVariant::ThreeD),
        other => Err(QmapError::Config(format!("unknown variant `{other}`"))),
    }
}

fn load_scheme_file(path: &PathBuf) -> Result<qmap::scheme::GradientScheme> {
    parse_scheme(&std::fs::read_to_string(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Scheme { action } => match action {
            SchemeCmd::Stats { input } => {
                let scheme = load_scheme_file(&input)?;
                println!("acquisitions: {} (b=0: {})", scheme.entries().len() + scheme.n_b0(), scheme.n_b0());
                let shells = group_shells(&scheme, SHELL_TOLERANCE)?;
                for s in &shells.shells {
                    println!("shell b={:.1}: {} directions", s.b, s.members.len());
                }
                match condition_number(&scheme) {
                    Ok(cn) => println!("condition number: {cn:.4}"),
                    Err(e) => println!("condition number: unavailable ({e})"),
                }
            }
            SchemeCmd::Subset { input, k, candidates, seed } => {
                let scheme = load_scheme_file(&input)?;
                let sub = select_subset(&scheme, k, candidates, seed)?;
                print!("{}", sub.to_text());
                eprintln!(
                    "selected {} directions, condition number {:.4}",
                    sub.n_dw(),
                    condition_number(&sub)?
                );
            }
        },
        Cmd::Gen { model, n, qn, variant, snr, seed, out, protons } => {
            let variant = parse_variant(&variant)?;
            let snr = parse_snr(&snr)?;
            let sim = match model {
                ModelKind::Dti => SimConfig::desk_dti(),
                ModelKind::Noddi => SimConfig::desk_noddi(),
            }
            .with_protons(protons);
            let q_cfg = QmatrixConfig {
                q_n: qn,
                variant,
                b_norm: match model {
                    ModelKind::Dti => qmap::forward::DTI_B_NORM,
                    ModelKind::Noddi => qmap::forward::NODDI_B_NORM,
                },
                per_shell: model == ModelKind::Noddi && variant == QmatrixVariant::TwoD,
                mirror: true,
            };
            let ds = generate_dataset(model, n, &sim, snr, &q_cfg, seed, &out)?;
            println!(
                "wrote {} samples ({} inputs, {} labels) to {}",
                ds.n_samples(),
                ds.inputs.ncols(),
                ds.label_dim(),
                out.display()
            );
        }
        Cmd::Train { dataset, net, epochs, seed, out } => {
            let (ds, meta) = read_dataset(&dataset)?;
            let kind = match net.to_ascii_lowercase().as_str() {
                "resconv" => NetKind::ResConv,
                "mlp" => NetKind::Mlp,
                other => return Err(QmapError::Config(format!("unknown net `{other}`"))),
            };
            let spec = match (kind, &ds.layout) {
                (NetKind::ResConv, qmap::io::DatasetLayout::Qmatrix { q_n, channels, variant }) => {
                    let q_cfg = meta.and_then(|m| m.qmatrix).unwrap_or(QmatrixConfig {
                        q_n: *q_n,
                        variant: *variant,
                        b_norm: match ds.model {
                            ModelKind::Dti => qmap::forward::DTI_B_NORM,
                            ModelKind::Noddi => qmap::forward::NODDI_B_NORM,
                        },
                        per_shell: *channels == 9,
                        mirror: true,
                    });
                    NetworkSpec::resconv(ds.model, q_cfg, seed)
                }
                (NetKind::Mlp, qmap::io::DatasetLayout::Signals { input_len }) => {
                    let spec = NetworkSpec::mlp(ds.model, seed);
                    if spec.input.flat_len() != *input_len {
                        return Err(QmapError::Shape(format!(
                            "dataset pads to {input_len} but the baseline expects {}",
                            spec.input.flat_len()
                        )));
                    }
                    spec
                }
                (NetKind::ResConv, _) => {
                    return Err(QmapError::Data(
                        "resconv training needs a Qmatrix dataset".into(),
                    ))
                }
                (NetKind::Mlp, _) => {
                    return Err(QmapError::Data(
                        "mlp training needs a signal-vector dataset".into(),
                    ))
                }
            };
            let mut network = init_network(&spec)?;
            let cfg = TrainConfig { epochs, seed, ..Default::default() };
            let report = train(&mut network, &ds, &cfg)?;
            for (e, (tl, vl)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
                println!("epoch {e:3}  train mse {tl:.6e}  val mse {vl:.6e}");
            }
            println!(
                "best epoch {} (val mse {:.6e}); saving {}",
                report.best_epoch,
                report.best_val,
                out.display()
            );
            save_network(&out, &network)?;
        }
        Cmd::Infer { weights, scheme, signals, out, mask } => {
            let net = load_network(&weights)?;
            let scheme = load_scheme_file(&scheme)?;
            let vol = read_volume(&signals)?;
            let mask = mask.map(|p| read_volume(&p)).transpose()?;
            let maps = infer_volume(&net, &vol, &scheme, mask.as_ref())?;
            write_maps(&out, &maps)?;
            println!("wrote {} maps to {}", maps.params.join(","), out.display());
        }
        Cmd::Fit { model, scheme, signals, out, mask } => {
            let scheme = load_scheme_file(&scheme)?;
            let vol = read_volume(&signals)?;
            let mask = mask.map(|p| read_volume(&p)).transpose()?;
            let maps = fit_volume(model, &scheme, &vol, mask.as_ref())?;
            write_maps(&out, &maps)?;
            println!("wrote {} maps to {}", maps.params.join(","), out.display());
        }
        Cmd::Eval { pred, reference, mask, out } => {
            let pred = read_volume(&pred)?;
            let reference = read_volume(&reference)?;
            if pred.shape != reference.shape {
                return Err(QmapError::Shape("pred/ref shape mismatch".into()));
            }
            let mask = mask.map(|p| read_volume(&p)).transpose()?;
            let mask_vec: Option<Vec<bool>> = mask
                .as_ref()
                .map(|m| (0..m.n_voxels()).map(|v| m.voxel(v)[0] != 0.0).collect());
            let mut report = serde_json::Map::new();
            let n_vox = pred.n_voxels();
            let mut mean = 0.0;
            for (c, name) in pred.params.iter().enumerate() {
                let p: Vec<f64> = (0..n_vox).map(|v| pred.voxel(v)[c] as f64).collect();
                let r: Vec<f64> = (0..n_vox).map(|v| reference.voxel(v)[c] as f64).collect();
                let v = nrmse(&p, &r, mask_vec.as_deref())?;
                mean += v;
                println!("{name}: NRMSE {v:.3}%");
                report.insert(name.clone(), serde_json::json!(v));
            }
            mean /= pred.params.len() as f64;
            report.insert("mean".into(), serde_json::json!(mean));
            println!("mean: {mean:.3}%");
            serde_json::to_writer_pretty(
                std::io::BufWriter::new(std::fs::File::create(&out)?),
                &serde_json::Value::Object(report),
            )?;
        }
        Cmd::Experiment { config } => {
            let report = run_experiment(&config)?;
            println!("experiment `{}` (seed {})", report.name, report.seed);
            for row in &report.rows {
                let detail: Vec<String> = row
                    .per_param
                    .iter()
                    .map(|(k, v)| format!("{k} {:.2}±{:.2}%", v.mean, v.std))
                    .collect();
                println!(
                    "  {}: mean NRMSE {:.2}%  [{}]",
                    row.label,
                    row.mean_nrmse,
                    detail.join(", ")
                );
            }
            for (k, p) in &report.rank_sum_p {
                println!("  rank-sum {k}: p = {p:.4}");
            }
        }
    }
    Ok(())
}

/// Volume or CSV, chosen by the output extension.
fn write_maps(out: &PathBuf, maps: &Volume) -> Result<()> {
    if out.extension().and_then(|e| e.to_str()) == Some("csv") {
        write_volume_csv(out, maps)
    } else {
        write_volume(out, maps)
    }
}

/// Voxelwise conventional fitting.
fn fit_volume(
    model: ModelKind,
    scheme: &qmap::scheme::GradientScheme,
    signals: &Volume,
    mask: Option<&Volume>,
) -> Result<Volume> {
    use rayon::prelude::*;
    if signals.shape[3] != scheme.n_dw() {
        return Err(QmapError::Shape(format!(
            "volume carries {} channels but the scheme has {} DW entries",
            signals.shape[3],
            scheme.n_dw()
        )));
    }
    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    let mut out = Volume::new(
        [signals.shape[0], signals.shape[1], signals.shape[2], names.len()],
        names,
        Some(model),
    )?;
    let n_vox = signals.n_voxels();
    let rows: Vec<Result<Vec<f64>>> = (0..n_vox)
        .into_par_iter()
        .map(|v| {
            let in_mask = mask.map(|m| m.voxel(v)[0] != 0.0).unwrap_or(true);
            if !in_mask {
                return Ok(vec![0.0; model.param_dim()]);
            }
            let sig = SignalSet {
                values: signals.voxel(v).iter().map(|&s| s as f64).collect(),
            };
            match model {
                ModelKind::Dti => {
                    let fit = fit_dti_lls(&sig, scheme)?;
                    let eig = eig_sym3(&fit.tensor);
                    let s = dti_scalars(eig.values[0], eig.values[1], eig.values[2]);
                    Ok(vec![s.fa, s.md, s.ad, s.rd])
                }
                ModelKind::Noddi => {
                    let fit = fit_noddi(&sig, scheme, &NoddiGridSpec::default(), 50)?;
                    Ok(vec![fit.icvf, fit.isovf, fit.odi])
                }
            }
        })
        .collect();
    for (v, row) in rows.into_iter().enumerate() {
        for (c, &x) in row?.iter().enumerate() {
            out.voxel_mut(v)[c] = x as f32;
        }
    }
    Ok(out)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage problems exit 1
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
