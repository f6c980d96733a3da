//! Training loop (MSE + Adam with per-epoch learning-rate decay) and
//! voxelwise volume inference.
//!
//! Gradient accumulation splits each minibatch into a fixed number of
//! sub-batches processed in parallel; sub-batch gradients are summed in
//! index order, so results do not depend on the worker count.

use crate::error::{QmapError, Result};
use crate::io::{Dataset, Volume};
use crate::qmatrix::encode;
use crate::regressor::{InputKind, Network};
use crate::scheme::{group_shells, normalize_qpoints, GradientScheme, SHELL_TOLERANCE};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// Fixed sub-batch count for parallel gradient accumulation.
const GRAD_CHUNKS: usize = 4;

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr0: f64,
    /// Learning-rate decay applied once per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 100,
            lr0: 1e-3,
            decay: 0.87,
            epochs: 10,
            seed: 0,
            val_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(QmapError::Config("batch must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(QmapError::Config("decay must be in (0, 1]".into()));
        }
        if !(0.0..0.9).contains(&self.val_fraction) {
            return Err(QmapError::Config("val_fraction must be in [0, 0.9)".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based): lr0 * decay^epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }
}

/// Adam moment estimates with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    fn step(&mut self, weights: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..weights.len() {
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let mhat = m / bc1;
            let vhat = v / bc2;
            weights[i] -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

/// One optimizer step on a minibatch of dataset rows. Returns the batch MSE.
/// Gradients are the exact full-batch MSE gradients; accumulation order is
/// fixed. Aborts on non-finite loss.
pub fn backward_and_step(
    net: &mut Network<f32>,
    inputs: &Array2<f32>,
    targets: &Array2<f32>,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(QmapError::Config("empty batch".into()));
    }
    if targets.nrows() != n {
        return Err(QmapError::Shape("inputs/targets row mismatch".into()));
    }
    let out_dim = targets.ncols();
    let denom = (n * out_dim) as f32;

    // fixed chunking: results are independent of the rayon schedule
    let bounds: Vec<(usize, usize)> = (0..GRAD_CHUNKS)
        .map(|c| (c * n / GRAD_CHUNKS, (c + 1) * n / GRAD_CHUNKS))
        .filter(|(lo, hi)| hi > lo)
        .collect();
    let pieces: Vec<Result<(Vec<f32>, f64)>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let rows = inputs.slice(ndarray::s![lo..hi, ..]).to_owned();
            let tg = targets.slice(ndarray::s![lo..hi, ..]);
            let x = net.batch_from_rows(&rows)?;
            let (y, caches) = net.forward_cached(&x)?;
            let mut se = 0.0f64;
            let mut dout = y;
            for (d, &t) in dout.iter_mut().zip(tg.iter()) {
                let r = *d - t;
                se += (r as f64) * (r as f64);
                *d = 2.0 * r / denom;
            }
            let grads = net.backward(&caches, dout)?;
            Ok((grads, se))
        })
        .collect();

    let mut grads = vec![0.0f32; net.n_params()];
    let mut se = 0.0f64;
    for piece in pieces {
        let (g, s) = piece?;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
        se += s;
    }
    let loss = se / denom as f64;
    if !loss.is_finite() {
        return Err(QmapError::Numerical(format!(
            "non-finite training loss {loss} at adam step {}",
            adam.t + 1
        )));
    }
    adam.step(&mut net.weights, &grads, lr);
    Ok(loss)
}

/// Per-epoch training and validation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// MSE of the network over rows, evaluated in chunks.
fn eval_loss(net: &Network<f32>, inputs: &Array2<f32>, targets: &Array2<f32>) -> Result<f64> {
    let n = inputs.nrows();
    if n == 0 {
        return Ok(f64::NAN);
    }
    let chunk = 256;
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let ses: Vec<Result<f64>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + chunk).min(n);
            let rows = inputs.slice(ndarray::s![lo..hi, ..]).to_owned();
            let x = net.batch_from_rows(&rows)?;
            let y = net.forward_batch(&x)?;
            let tg = targets.slice(ndarray::s![lo..hi, ..]);
            Ok(y.iter()
                .zip(tg.iter())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum())
        })
        .collect();
    let mut se = 0.0;
    for s in ses {
        se += s?;
    }
    Ok(se / (n * targets.ncols()) as f64)
}

/// Trains with epoch-shuffled minibatches; keeps the weights of the epoch
/// with the best validation loss. Deterministic for a fixed seed.
pub fn train(net: &mut Network<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let n = data.n_samples();
    if n == 0 {
        return Err(QmapError::Config("empty dataset".into()));
    }
    if data.label_dim() != net.spec.output_dim {
        return Err(QmapError::Shape(format!(
            "dataset labels ({}) vs network outputs ({})",
            data.label_dim(),
            net.spec.output_dim
        )));
    }
    let n_val = ((n as f64) * cfg.val_fraction).round() as usize;
    let n_train = n - n_val;
    if n_train == 0 {
        return Err(QmapError::Config("no training samples after split".into()));
    }
    let val_inputs = data.inputs.slice(ndarray::s![n_train.., ..]).to_owned();
    let val_labels = data.labels.slice(ndarray::s![n_train.., ..]).to_owned();

    let mut adam = AdamState::new(net.n_params(), cfg);
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val: f64::INFINITY,
    };
    let mut best_weights = net.weights.clone();
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = crate::math::stream_rng(cfg.seed, 0x1000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_se = 0.0;
        let mut seen = 0usize;
        for batch_idx in order.chunks(cfg.batch) {
            let inputs = data.inputs.select(Axis(0), batch_idx);
            let targets = data.labels.select(Axis(0), batch_idx);
            let loss = backward_and_step(net, &inputs, &targets, &mut adam, lr)?;
            epoch_se += loss * batch_idx.len() as f64;
            seen += batch_idx.len();
        }
        let train_loss = epoch_se / seen as f64;
        let val_loss = if n_val > 0 {
            eval_loss(net, &val_inputs, &val_labels)?
        } else {
            train_loss
        };
        if val_loss < report.best_val {
            report.best_val = val_loss;
            report.best_epoch = epoch;
            best_weights.copy_from_slice(&net.weights);
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
    }
    net.weights = best_weights;
    Ok(report)
}

/// Voxelwise inference: encodes each in-mask voxel's signals for the
/// network input and writes parameter maps in map units. Voxels outside
/// the mask stay zero.
pub fn infer_volume(
    net: &Network<f32>,
    signals: &Volume,
    scheme: &GradientScheme,
    mask: Option<&Volume>,
) -> Result<Volume> {
    let n_dw = scheme.n_dw();
    if signals.shape[3] != n_dw {
        return Err(QmapError::Shape(format!(
            "volume carries {} signal channels but the scheme has {n_dw} DW entries",
            signals.shape[3]
        )));
    }
    if let Some(m) = mask {
        if m.shape[..3] != signals.shape[..3] {
            return Err(QmapError::Shape("mask shape mismatch".into()));
        }
    }
    let model = net.spec.model;
    let mut out = Volume::new(
        [signals.shape[0], signals.shape[1], signals.shape[2], model.param_dim()],
        model.param_names().iter().map(|s| s.to_string()).collect(),
        Some(model),
    )?;

    // scheme-dependent encoding state is shared across voxels
    let encode_ctx = match net.spec.input {
        InputKind::Qmatrix2d { .. } | InputKind::Qmatrix3d { .. } => {
            let q_cfg = net.spec.qmatrix.ok_or_else(|| {
                QmapError::Config("network spec lacks its Qmatrix encoder config".into())
            })?;
            let qpoints = normalize_qpoints(scheme, q_cfg.b_norm)?;
            let shells = if q_cfg.per_shell {
                Some(group_shells(scheme, SHELL_TOLERANCE)?)
            } else {
                None
            };
            Some((q_cfg, qpoints, shells))
        }
        InputKind::Signals { len } => {
            if n_dw > len {
                return Err(QmapError::Shape(format!(
                    "{n_dw} signals exceed the network input length {len}"
                )));
            }
            None
        }
    };

    let n_vox = signals.n_voxels();
    let in_len = net.spec.input.flat_len();
    let chunk = 256;
    let starts: Vec<usize> = (0..n_vox).step_by(chunk).collect();
    let results: Vec<Result<(usize, Vec<f32>)>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + chunk).min(n_vox);
            let mut active: Vec<usize> = Vec::with_capacity(hi - lo);
            for v in lo..hi {
                let in_mask = mask.map(|m| m.voxel(v)[0] != 0.0).unwrap_or(true);
                if in_mask {
                    active.push(v);
                }
            }
            let mut block = vec![0.0f32; (hi - lo) * net.spec.output_dim];
            if active.is_empty() {
                return Ok((lo, block));
            }
            let mut rows = Array2::<f32>::zeros((active.len(), in_len));
            for (r, &v) in active.iter().enumerate() {
                let sig = signals.voxel(v);
                match &encode_ctx {
                    Some((q_cfg, qpoints, shells)) => {
                        let vals: Vec<f64> = sig.iter().map(|&s| s as f64).collect();
                        let qm = encode(qpoints, &vals, q_cfg, shells.as_ref())?;
                        for (dst, &src) in rows.row_mut(r).iter_mut().zip(qm.data.iter()) {
                            *dst = src as f32;
                        }
                    }
                    None => {
                        for (dst, &src) in rows.row_mut(r).iter_mut().zip(sig.iter()) {
                            *dst = src;
                        }
                    }
                }
            }
            let x = net.batch_from_rows(&rows)?;
            let y = net.forward_batch(&x)?;
            for (r, &v) in active.iter().enumerate() {
                let base = (v - lo) * net.spec.output_dim;
                for c in 0..net.spec.output_dim {
                    block[base + c] = (y[(r, c)] as f64 * net.spec.output_scale[c]) as f32;
                }
            }
            Ok((lo, block))
        })
        .collect();

    let out_dim = net.spec.output_dim;
    for res in results {
        let (lo, block) = res?;
        let dst = &mut out.data[lo * out_dim..lo * out_dim + block.len()];
        dst.copy_from_slice(&block);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::DatasetLayout;
    use crate::regressor::{init_network, NetworkSpec};
    use crate::ModelKind;
    use rand::Rng;

    /// Synthetic linear task: y = A s for padded signal vectors.
    fn linear_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::math::stream_rng(seed, 0);
        let in_len = 8;
        let out_len = 3;
        let a: Vec<f64> = (0..in_len * out_len).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..in_len).map(|_| rng.random::<f64>()).collect();
            for &v in &x {
                inputs.push(v as f32);
            }
            for o in 0..out_len {
                let y: f64 = (0..in_len).map(|i| a[o * in_len + i] * x[i]).sum();
                labels.push(y as f32);
            }
        }
        Dataset {
            model: ModelKind::Noddi,
            layout: DatasetLayout::Signals { input_len: in_len },
            inputs: Array2::from_shape_vec((n, in_len), inputs).unwrap(),
            labels: Array2::from_shape_vec((n, out_len), labels).unwrap(),
        }
    }

    fn small_mlp(seed: u64) -> Network<f32> {
        let spec = NetworkSpec {
            kind: crate::regressor::NetKind::Mlp,
            model: ModelKind::Noddi,
            input: InputKind::Signals { len: 8 },
            output_dim: 3,
            seed,
            conv_channels: 0,
            res_blocks: 0,
            dense_width: 0,
            mlp_hidden: vec![16, 16],
            output_scale: vec![1.0; 3],
            qmatrix: None,
        };
        init_network(&spec).unwrap()
    }

    #[test]
    fn lr_decay_schedule() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 1e-3).abs() < 1e-18);
        assert!((cfg.lr_at(10) - 1e-3 * 0.87f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = linear_dataset(600, 2);
        let cfg = TrainConfig { epochs: 8, batch: 50, seed: 5, ..Default::default() };
        let mut net_a = small_mlp(7);
        let rep_a = train(&mut net_a, &data, &cfg).unwrap();
        assert!(
            rep_a.train_loss.last().unwrap() < &rep_a.train_loss[0],
            "loss did not descend: {:?}",
            rep_a.train_loss
        );
        let mut net_b = small_mlp(7);
        let rep_b = train(&mut net_b, &data, &cfg).unwrap();
        assert_eq!(rep_a.train_loss, rep_b.train_loss);
        assert_eq!(rep_a.val_loss, rep_b.val_loss);
        assert_eq!(net_a.weights, net_b.weights);
    }

    #[test]
    fn zero_gradient_batch_leaves_weights_near_fixed() {
        // labels equal to outputs: gradients vanish, only Adam's epsilon
        // denominators act; weights stay put
        let mut net = small_mlp(3);
        let data = linear_dataset(20, 9);
        let inputs = data.inputs.clone();
        let x = net.batch_from_rows(&inputs).unwrap();
        let outputs = net.forward_batch(&x).unwrap();
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new(net.n_params(), &cfg);
        let before = net.weights.clone();
        let loss = backward_and_step(&mut net, &inputs, &outputs, &mut adam, 1e-3).unwrap();
        assert!(loss < 1e-12);
        let max_move = net
            .weights
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_move < 1e-6, "weights moved by {max_move}");
    }

    #[test]
    fn adam_step_matches_hand_computation() {
        // single weight, single step: w -= lr * g / (|g| + eps)
        let mut net = small_mlp(11);
        let w0 = net.weights[0];
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new(net.n_params(), &cfg);
        let mut grads = vec![0.0f32; net.n_params()];
        grads[0] = 0.25;
        adam.step(&mut net.weights, &grads, 1e-3);
        // bias-corrected first step: mhat = g, vhat = g^2
        let want = w0 - (1e-3 * 0.25 / (0.25 + 1e-8)) as f32;
        assert!((net.weights[0] - want).abs() < 1e-9);
    }

    #[test]
    fn validation_checkpoint_restores_best_epoch() {
        let data = linear_dataset(300, 4);
        let cfg = TrainConfig {
            epochs: 6,
            batch: 30,
            seed: 2,
            // aggressive rate so later epochs can overshoot
            lr0: 0.05,
            ..Default::default()
        };
        let mut net = small_mlp(1);
        let rep = train(&mut net, &data, &cfg).unwrap();
        let best = rep.val_loss[rep.best_epoch];
        assert!(rep.val_loss.iter().all(|&v| v >= best - 1e-12));
        assert!((rep.best_val - best).abs() < 1e-15);
    }

    #[test]
    fn aborts_on_nonfinite_loss() {
        let mut net = small_mlp(5);
        for w in net.weights.iter_mut() {
            *w = f32::MAX / 2.0;
        }
        let data = linear_dataset(10, 6);
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new(net.n_params(), &cfg);
        let err = backward_and_step(&mut net, &data.inputs, &data.labels, &mut adam, 1e-3);
        assert!(err.is_err());
    }
}
