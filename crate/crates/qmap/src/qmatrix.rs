//! Quantized q-space encoding: turns a (scheme, signal) pair into a dense
//! grid tensor whose cell positions carry the gradient direction and b-value,
//! making the downstream regressor independent of the acquisition scheme.

use crate::error::{QmapError, Result};
use crate::scheme::{QPoint, ShellPartition};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Qmatrix variant: three plane projections or the full 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QmatrixVariant {
    TwoD,
    ThreeD,
}

/// Encoding configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QmatrixConfig {
    /// Quantization bins per axis.
    pub q_n: usize,
    pub variant: QmatrixVariant,
    /// Normalization b-value (s/mm^2).
    pub b_norm: f64,
    /// Project each shell separately (three-shell data: 9 channels).
    pub per_shell: bool,
    /// Also bin each point at -q. The diffusion-weighted signal is
    /// antipodally symmetric, and mirroring makes hemisphere-convention
    /// acquisition tables encode like full-sphere ones; without it a
    /// network trained on full-sphere schemes falls apart on vendor-style
    /// half-sphere direction sets.
    #[serde(default = "default_mirror")]
    pub mirror: bool,
}

fn default_mirror() -> bool {
    true
}

impl QmatrixConfig {
    /// Default DTI encoding: 2D, q_n = 20, b_norm = 1300, mirrored.
    pub fn dti_default() -> Self {
        QmatrixConfig {
            q_n: 20,
            variant: QmatrixVariant::TwoD,
            b_norm: crate::forward::DTI_B_NORM,
            per_shell: false,
            mirror: true,
        }
    }

    /// Default NODDI encoding: 2D per-shell (9 channels), b_norm = 2300.
    pub fn noddi_default() -> Self {
        QmatrixConfig {
            q_n: 20,
            variant: QmatrixVariant::TwoD,
            b_norm: crate::forward::NODDI_B_NORM,
            per_shell: true,
            mirror: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.q_n < 2 {
            return Err(QmapError::Config("q_n must be at least 2".into()));
        }
        if self.b_norm <= 0.0 {
            return Err(QmapError::Config("b_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Dense quantized q-space tensor.
///
/// 2D variant: shape (q_n, q_n, channels) with channel blocks [xy, yz, xz]
/// per shell (single-shell: 3 channels; per-shell three-shell: 9).
/// 3D variant: shape (q_n, q_n, q_n). A cell holds the arithmetic mean of
/// the signals that landed in it; `counts` records the multiplicity.
/// Without mirroring every signal contributes to exactly one bin per
/// projection plane (one cell in 3D); with mirroring, one per hemisphere
/// copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Qmatrix {
    pub data: Array3<f64>,
    pub counts: Array3<u32>,
    pub variant: QmatrixVariant,
}

impl Qmatrix {
    pub fn q_n(&self) -> usize {
        self.data.shape()[0]
    }

    /// Channel count of the 2D layout (the last axis).
    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Quantizes a coordinate in [-1, 1] to a bin in [0, q_n-1]:
/// floor((coord+1)/2 * q_n), with coord = +1 clamped into the top bin.
pub fn bin_index(coord: f64, q_n: usize) -> Result<usize> {
    if !(-1.0..=1.0).contains(&coord) {
        return Err(QmapError::Domain(format!("coordinate {coord} outside [-1,1]")));
    }
    let raw = ((coord + 1.0) / 2.0 * q_n as f64).floor() as usize;
    Ok(raw.min(q_n - 1))
}

/// q-point coordinates clamped for the radius tolerance |coords| <= 1+1e-9.
fn clamped(c: f64) -> Result<f64> {
    if c > 1.0 {
        if c > 1.0 + 1e-9 {
            return Err(QmapError::Domain(format!("q coordinate {c} above 1")));
        }
        Ok(1.0)
    } else if c < -1.0 {
        if c < -(1.0 + 1e-9) {
            return Err(QmapError::Domain(format!("q coordinate {c} below -1")));
        }
        Ok(-1.0)
    } else {
        Ok(c)
    }
}

/// Mean-accumulating bin store. Contributions to a bin are sorted before
/// summation so the encoding is bit-identical under input permutation.
struct BinAccumulator {
    /// (flat bin id, signal) contribution list.
    entries: Vec<(usize, f64)>,
}

impl BinAccumulator {
    fn new() -> Self {
        BinAccumulator { entries: Vec::new() }
    }

    fn push(&mut self, bin: usize, signal: f64) {
        self.entries.push((bin, signal));
    }

    fn write_means(mut self, data: &mut [f64], counts: &mut [u32]) {
        self.entries
            .sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut i = 0;
        while i < self.entries.len() {
            let bin = self.entries[i].0;
            let mut j = i;
            let mut sum = 0.0;
            while j < self.entries.len() && self.entries[j].0 == bin {
                sum += self.entries[j].1;
                j += 1;
            }
            let n = (j - i) as u32;
            data[bin] = sum / n as f64;
            counts[bin] = n;
            i = j;
        }
    }
}

/// 2D encoding: each q-point projects onto the xy-, yz-, and xz-planes.
///
/// Channel layout: single-shell [xy, yz, xz]; per-shell mode repeats the
/// three planes per shell ascending in b (9 channels for 3 shells).
/// `shells` must be given iff `cfg.per_shell`.
pub fn encode_2d(
    qpoints: &[QPoint],
    signals: &[f64],
    cfg: &QmatrixConfig,
    shells: Option<&ShellPartition>,
) -> Result<Qmatrix> {
    cfg.validate()?;
    if qpoints.len() != signals.len() {
        return Err(QmapError::Shape(format!(
            "{} q-points vs {} signals",
            qpoints.len(),
            signals.len()
        )));
    }
    let q = cfg.q_n;
    let n_shells = if cfg.per_shell {
        let shells = shells.ok_or_else(|| {
            QmapError::Shape("per-shell encoding requires a shell partition".into())
        })?;
        if shells.n_shells() != 3 {
            return Err(QmapError::Shape(format!(
                "per-shell encoding expects 3 shells (9 channels), got {}",
                shells.n_shells()
            )));
        }
        3
    } else {
        1
    };
    let channels = 3 * n_shells;

    // signal index -> shell ordinal
    let shell_of: Vec<usize> = if cfg.per_shell {
        let shells = shells.unwrap();
        let mut map = vec![usize::MAX; signals.len()];
        for (ord, shell) in shells.shells.iter().enumerate() {
            for &m in &shell.members {
                if m >= map.len() {
                    return Err(QmapError::Shape(format!(
                        "shell member index {m} beyond signal list"
                    )));
                }
                map[m] = ord;
            }
        }
        if map.iter().any(|&s| s == usize::MAX) {
            return Err(QmapError::Shape(
                "shell partition does not cover every signal".into(),
            ));
        }
        map
    } else {
        vec![0; signals.len()]
    };

    let mut acc = BinAccumulator::new();
    for p in qpoints {
        let signal = *signals.get(p.signal_index).ok_or_else(|| {
            QmapError::Shape(format!("signal index {} out of range", p.signal_index))
        })?;
        let base = 3 * shell_of[p.signal_index];
        let signs: &[f64] = if cfg.mirror { &[1.0, -1.0] } else { &[1.0] };
        for &s in signs {
            let x = clamped(s * p.coords.x)?;
            let y = clamped(s * p.coords.y)?;
            let z = clamped(s * p.coords.z)?;
            let (bx, by, bz) = (bin_index(x, q)?, bin_index(y, q)?, bin_index(z, q)?);
            // one bin per projection plane: xy, yz, xz
            for (ch, (i, j)) in [(bx, by), (by, bz), (bx, bz)].into_iter().enumerate() {
                acc.push((i * q + j) * channels + base + ch, signal);
            }
        }
    }
    let mut data = vec![0.0f64; q * q * channels];
    let mut counts = vec![0u32; q * q * channels];
    acc.write_means(&mut data, &mut counts);
    Ok(Qmatrix {
        data: Array3::from_shape_vec((q, q, channels), data).expect("shape matches"),
        counts: Array3::from_shape_vec((q, q, channels), counts).expect("shape matches"),
        variant: QmatrixVariant::TwoD,
    })
}

/// 3D encoding: one cell per q-point, same mean-collision rule.
pub fn encode_3d(qpoints: &[QPoint], signals: &[f64], cfg: &QmatrixConfig) -> Result<Qmatrix> {
    cfg.validate()?;
    if qpoints.len() != signals.len() {
        return Err(QmapError::Shape(format!(
            "{} q-points vs {} signals",
            qpoints.len(),
            signals.len()
        )));
    }
    let q = cfg.q_n;
    let mut acc = BinAccumulator::new();
    for p in qpoints {
        let signal = *signals.get(p.signal_index).ok_or_else(|| {
            QmapError::Shape(format!("signal index {} out of range", p.signal_index))
        })?;
        let signs: &[f64] = if cfg.mirror { &[1.0, -1.0] } else { &[1.0] };
        for &s in signs {
            let bx = bin_index(clamped(s * p.coords.x)?, q)?;
            let by = bin_index(clamped(s * p.coords.y)?, q)?;
            let bz = bin_index(clamped(s * p.coords.z)?, q)?;
            acc.push((bx * q + by) * q + bz, signal);
        }
    }
    let mut data = vec![0.0f64; q * q * q];
    let mut counts = vec![0u32; q * q * q];
    acc.write_means(&mut data, &mut counts);
    Ok(Qmatrix {
        data: Array3::from_shape_vec((q, q, q), data).expect("shape matches"),
        counts: Array3::from_shape_vec((q, q, q), counts).expect("shape matches"),
        variant: QmatrixVariant::ThreeD,
    })
}

/// Encodes with the variant selected in `cfg`.
pub fn encode(
    qpoints: &[QPoint],
    signals: &[f64],
    cfg: &QmatrixConfig,
    shells: Option<&ShellPartition>,
) -> Result<Qmatrix> {
    match cfg.variant {
        QmatrixVariant::TwoD => encode_2d(qpoints, signals, cfg, shells),
        QmatrixVariant::ThreeD => encode_3d(qpoints, signals, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;
    use crate::scheme::QPoint;
    use proptest::prelude::*;

    fn point(x: f64, y: f64, z: f64, idx: usize) -> QPoint {
        QPoint { coords: Vec3::new(x, y, z), signal_index: idx }
    }

    /// Unmirrored 2D config: one bin per plane per point.
    fn cfg2d(q_n: usize) -> QmatrixConfig {
        QmatrixConfig {
            q_n,
            variant: QmatrixVariant::TwoD,
            b_norm: 1300.0,
            per_shell: false,
            mirror: false,
        }
    }

    #[test]
    fn bin_index_edges() {
        assert_eq!(bin_index(-1.0, 20).unwrap(), 0);
        assert_eq!(bin_index(1.0, 20).unwrap(), 19);
        assert_eq!(bin_index(0.0, 20).unwrap(), 10);
        assert!(bin_index(1.0001, 20).is_err());
        assert!(bin_index(-1.0001, 20).is_err());
    }

    #[test]
    fn empty_input_gives_zero_matrix() {
        let qm = encode_2d(&[], &[], &cfg2d(10), None).unwrap();
        assert!(qm.data.iter().all(|&v| v == 0.0));
        assert!(qm.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn single_point_lands_in_three_planes() {
        // point (0,0,1): xy plane bin (10,10); yz bin (10,19); xz bin (10,19)
        let qm = encode_2d(&[point(0.0, 0.0, 1.0, 0)], &[0.5], &cfg2d(20), None).unwrap();
        assert_eq!(qm.data[(10, 10, 0)], 0.5);
        assert_eq!(qm.data[(10, 19, 1)], 0.5);
        assert_eq!(qm.data[(10, 19, 2)], 0.5);
        assert_eq!(qm.counts.iter().map(|&c| c as usize).sum::<usize>(), 3);
        assert_eq!(
            qm.data.iter().filter(|&&v| v != 0.0).count(),
            3,
            "exactly one bin per plane"
        );
    }

    #[test]
    fn colliding_signals_average() {
        let pts = [point(0.0, 0.0, 1.0, 0), point(0.0, 0.0, 1.0, 1)];
        let qm = encode_2d(&pts, &[0.4, 0.6], &cfg2d(20), None).unwrap();
        assert_eq!(qm.data[(10, 10, 0)], 0.5);
        assert_eq!(qm.counts[(10, 10, 0)], 2);
    }

    #[test]
    fn encode_3d_cell_placement() {
        // (0,0,0.5) at q_n=10: floor((1.5)/2*10)=7 on z, 5 on x and y
        let cfg = QmatrixConfig {
            q_n: 10,
            variant: QmatrixVariant::ThreeD,
            b_norm: 1300.0,
            per_shell: false,
            mirror: false,
        };
        let qm = encode_3d(&[point(0.0, 0.0, 0.5, 0)], &[0.8], &cfg).unwrap();
        assert_eq!(qm.data[(5, 5, 7)], 0.8);
        assert_eq!(qm.counts[(5, 5, 7)], 1);
        assert_eq!(qm.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn refinement_never_reduces_occupied_cells() {
        let mut rng = crate::math::stream_rng(5, 0);
        let pts: Vec<QPoint> = (0..40)
            .map(|i| {
                let v = crate::math::sample_unit_sphere(&mut rng).scale(0.9);
                QPoint { coords: v, signal_index: i }
            })
            .collect();
        let sigs: Vec<f64> = (0..40).map(|i| 0.5 + 0.001 * i as f64).collect();
        let coarse = encode_3d(
            &pts,
            &sigs,
            &QmatrixConfig { q_n: 5, variant: QmatrixVariant::ThreeD, b_norm: 1.0, per_shell: false, mirror: false },
        )
        .unwrap();
        let fine = encode_3d(
            &pts,
            &sigs,
            &QmatrixConfig { q_n: 25, variant: QmatrixVariant::ThreeD, b_norm: 1.0, per_shell: false, mirror: false },
        )
        .unwrap();
        let n_coarse = coarse.counts.iter().filter(|&&c| c > 0).count();
        let n_fine = fine.counts.iter().filter(|&&c| c > 0).count();
        assert!(n_fine >= n_coarse);
    }

    #[test]
    fn per_shell_needs_three_shells() {
        let cfg = QmatrixConfig { per_shell: true, ..cfg2d(10) };
        let shells = ShellPartition {
            shells: vec![crate::scheme::Shell { b: 700.0, members: vec![0] }],
        };
        let err = encode_2d(&[point(0.0, 0.0, 1.0, 0)], &[0.5], &cfg, Some(&shells));
        assert!(matches!(err, Err(QmapError::Shape(_))));
        let err = encode_2d(&[point(0.0, 0.0, 1.0, 0)], &[0.5], &cfg, None);
        assert!(err.is_err());
    }

    #[test]
    fn per_shell_channel_blocks_follow_b_order() {
        let cfg = QmatrixConfig { per_shell: true, ..cfg2d(4) };
        let shells = ShellPartition {
            shells: vec![
                crate::scheme::Shell { b: 300.0, members: vec![0] },
                crate::scheme::Shell { b: 700.0, members: vec![1] },
                crate::scheme::Shell { b: 2000.0, members: vec![2] },
            ],
        };
        let pts = [
            point(-1.0, -1.0, -1.0, 0),
            point(-1.0, -1.0, -1.0, 1),
            point(-1.0, -1.0, -1.0, 2),
        ];
        let qm = encode_2d(&pts, &[0.9, 0.5, 0.2], &cfg, Some(&shells)).unwrap();
        assert_eq!(qm.channels(), 9);
        assert_eq!(qm.data[(0, 0, 0)], 0.9); // shell 0, xy
        assert_eq!(qm.data[(0, 0, 3)], 0.5); // shell 1, xy
        assert_eq!(qm.data[(0, 0, 6)], 0.2); // shell 2, xy
    }

    #[test]
    fn mirroring_makes_hemisphere_flips_equivalent() {
        // S(g) = S(-g): with mirroring, flipping any subset of directions
        // to the opposite hemisphere leaves the encoding bit-identical
        let mut rng = crate::math::stream_rng(9, 0);
        let cfg = QmatrixConfig { mirror: true, ..cfg2d(12) };
        let pts: Vec<QPoint> = (0..24)
            .map(|i| QPoint {
                coords: crate::math::sample_unit_sphere(&mut rng).scale(0.8),
                signal_index: i,
            })
            .collect();
        let sigs: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
        let flipped: Vec<QPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| QPoint {
                coords: if i % 2 == 0 { p.coords.scale(-1.0) } else { p.coords },
                signal_index: p.signal_index,
            })
            .collect();
        let a = encode_2d(&pts, &sigs, &cfg, None).unwrap();
        let b = encode_2d(&flipped, &sigs, &cfg, None).unwrap();
        assert_eq!(a, b);
        // and the 3D variant
        let cfg3 = QmatrixConfig { variant: QmatrixVariant::ThreeD, ..cfg };
        let a3 = encode_3d(&pts, &sigs, &cfg3).unwrap();
        let b3 = encode_3d(&flipped, &sigs, &cfg3).unwrap();
        assert_eq!(a3, b3);
    }

    #[test]
    fn mirrored_conservation_doubles() {
        // each signal lands once per hemisphere copy
        let mut rng = crate::math::stream_rng(10, 0);
        let cfg = QmatrixConfig { mirror: true, ..cfg2d(8) };
        let pts: Vec<QPoint> = (0..16)
            .map(|i| QPoint {
                coords: crate::math::sample_unit_sphere(&mut rng).scale(0.9),
                signal_index: i,
            })
            .collect();
        let sigs: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let qm = encode_2d(&pts, &sigs, &cfg, None).unwrap();
        let total: f64 = sigs.iter().sum();
        for ch in 0..3 {
            let lhs: f64 = qm
                .data
                .slice(ndarray::s![.., .., ch])
                .iter()
                .zip(qm.counts.slice(ndarray::s![.., .., ch]).iter())
                .map(|(&v, &c)| v * c as f64)
                .sum();
            assert!((lhs - 2.0 * total).abs() < 1e-12 * total.max(1.0));
        }
    }

    proptest! {
        /// Permuting input order leaves the encoding bit-identical, and the
        /// mean rule conserves per-channel signal sums.
        #[test]
        fn permutation_invariance_and_conservation(seed in 0u64..500) {
            let mut rng = crate::math::stream_rng(seed, 40);
            let n = 30usize;
            let pts: Vec<QPoint> = (0..n).map(|i| {
                let v = crate::math::sample_unit_sphere(&mut rng)
                    .scale(rng.random::<f64>());
                QPoint { coords: v, signal_index: i }
            }).collect();
            let sigs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let cfg = cfg2d(8);
            let a = encode_2d(&pts, &sigs, &cfg, None).unwrap();

            // shuffle jointly, keeping signal_index association intact
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let pts_sh: Vec<QPoint> = order.iter().map(|&i| pts[i]).collect();
            let b = encode_2d(&pts_sh, &sigs, &cfg, None).unwrap();
            prop_assert_eq!(&a, &b);

            // conservation: sum(data*count) per channel == sum of signals
            for ch in 0..3 {
                let lhs: f64 = a.data.slice(ndarray::s![.., .., ch]).iter()
                    .zip(a.counts.slice(ndarray::s![.., .., ch]).iter())
                    .map(|(&v, &c)| v * c as f64).sum();
                let rhs: f64 = sigs.iter().sum();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }
}
