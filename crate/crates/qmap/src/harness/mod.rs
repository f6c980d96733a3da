//! Evaluation harness: NRMSE, exact Wilcoxon rank-sum test, and experiment
//! orchestration.

pub mod experiment;

pub use experiment::{run_experiment, EvalReport, ExperimentConfig};

use crate::error::{QmapError, Result};
use crate::math::normal_cdf;

/// Normalized root-mean-square error in percent:
/// 100 * ||pred - ref||_2 / ||ref||_2 over the masked elements.
pub fn nrmse(pred: &[f64], reference: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(QmapError::Shape(format!(
            "{} predictions vs {} references",
            pred.len(),
            reference.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(QmapError::Shape("mask length mismatch".into()));
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut selected = 0usize;
    for i in 0..pred.len() {
        if mask.map(|m| m[i]).unwrap_or(true) {
            let d = pred[i] - reference[i];
            num += d * d;
            den += reference[i] * reference[i];
            selected += 1;
        }
    }
    if selected == 0 {
        return Err(QmapError::Domain("mask selects no elements".into()));
    }
    if den == 0.0 {
        return Err(QmapError::Domain(
            "reference is all-zero within the mask".into(),
        ));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// Wilcoxon rank-sum result. `approximate` marks the normal-approximation
/// branch (large samples, or ties that defeat exact enumeration).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSumTest {
    /// Two-sided p-value.
    pub p: f64,
    /// Rank sum of the first sample.
    pub statistic: f64,
    pub approximate: bool,
}

/// Two-sided Wilcoxon rank-sum test. Exact enumeration of the rank-sum
/// distribution when n+m <= 20 and the data are tie-free; otherwise
/// midranks plus the normal approximation with tie correction.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumTest> {
    if a.is_empty() || b.is_empty() {
        return Err(QmapError::Domain("both samples must be nonempty".into()));
    }
    let n = a.len();
    let m = b.len();
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    if pooled.iter().any(|(v, _)| !v.is_finite()) {
        return Err(QmapError::Domain("non-finite sample value".into()));
    }
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite"));
    let has_ties = pooled.windows(2).any(|w| w[0].0 == w[1].0);

    if n + m <= 20 && !has_ties {
        // exact: integer ranks 1..N; count rank subsets by sum
        let w_obs: u64 = pooled
            .iter()
            .enumerate()
            .filter(|(_, (_, is_a))| *is_a)
            .map(|(i, _)| i as u64 + 1)
            .sum();
        let p = exact_rank_sum_p(n, m, w_obs);
        return Ok(RankSumTest { p, statistic: w_obs as f64, approximate: false });
    }

    // midranks
    let total = n + m;
    let mut ranks = vec![0.0f64; total];
    let mut i = 0;
    let mut tie_correction = 0.0;
    while i < total {
        let mut j = i + 1;
        while j < total && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = rank;
        }
        let t = (j - i) as f64;
        tie_correction += t * t * t - t;
        i = j;
    }
    let w: f64 = ranks
        .iter()
        .zip(&pooled)
        .filter(|(_, (_, is_a))| *is_a)
        .map(|(r, _)| *r)
        .sum();
    let nf = n as f64;
    let mf = m as f64;
    let tf = total as f64;
    let mean = nf * (tf + 1.0) / 2.0;
    let var = nf * mf / 12.0 * ((tf + 1.0) - tie_correction / (tf * (tf - 1.0)));
    if var <= 0.0 {
        // all values identical
        return Ok(RankSumTest { p: 1.0, statistic: w, approximate: true });
    }
    // continuity correction toward the mean
    let z = (w - mean).abs().max(0.5) - 0.5;
    let z = z / var.sqrt();
    let p = (2.0 * (1.0 - normal_cdf(z))).clamp(0.0, 1.0);
    Ok(RankSumTest { p, statistic: w, approximate: true })
}

/// Exact two-sided p-value: 2 * min(P(W <= w), P(W >= w)) capped at 1,
/// from the full distribution of the rank sum of `n` ranks drawn from
/// {1..n+m} (dynamic program over "ways to choose k ranks summing to s").
fn exact_rank_sum_p(n: usize, m: usize, w_obs: u64) -> f64 {
    let total = n + m;
    let max_sum: usize = (total - n + 1..=total).sum();
    // ways[k][s]: subsets of size k with rank sum s
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n + 1];
    ways[0][0] = 1.0;
    for r in 1..=total {
        // descending so each rank is used at most once
        for k in (1..=n.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                ways[k][s] += ways[k - 1][s - r];
            }
        }
    }
    let dist = &ways[n];
    let total_ways: f64 = dist.iter().sum();
    let w = w_obs as usize;
    let lo: f64 = dist.iter().take(w.min(max_sum) + 1).sum();
    let hi: f64 = dist.iter().skip(w.min(max_sum)).sum();
    (2.0 * (lo.min(hi)) / total_ways).min(1.0)
}
