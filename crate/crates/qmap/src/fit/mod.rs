//! Conventional reference reconstructions: log-linear least-squares DTI with
//! eigendecomposition and scalar maps, and a grid-plus-refinement NODDI
//! fitter. Used both as label generators and as accuracy references.

pub mod noddi;

pub use noddi::{fit_noddi, NoddiFit, NoddiGridSpec, DEFAULT_REFINE_STEPS};

use crate::error::{QmapError, Result};
use crate::forward::SignalSet;
use crate::math::{jacobi_eigh, Vec3};
use crate::scheme::{design_row, GradientScheme};

/// Fitted diffusion tensor: six unique elements (Dxx, Dyy, Dzz, Dxy, Dxz,
/// Dyz) in mm^2/s plus the fit RMSE in log-signal units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtiTensorFit {
    pub tensor: [f64; 6],
    pub residual: f64,
}

/// Scalar maps of a tensor eigensystem; diffusivities in mm^2/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtiScalars {
    pub fa: f64,
    pub md: f64,
    pub ad: f64,
    pub rd: f64,
}

impl DtiScalars {
    pub fn to_array(self) -> [f64; 4] {
        [self.fa, self.md, self.ad, self.rd]
    }
}

/// Eigensystem of a symmetric 3x3 tensor, eigenvalues descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eig3 {
    pub values: [f64; 3],
    pub vectors: [Vec3; 3],
}

/// Ordinary least squares on -ln(S_i) = b_i * g_i^T D g_i in the six unique
/// tensor elements, solved through the spectral decomposition of the normal
/// matrix.
pub fn fit_dti_lls(signals: &SignalSet, scheme: &GradientScheme) -> Result<DtiTensorFit> {
    let dw: Vec<(f64, Vec3)> = scheme.dw_entries().map(|e| (e.b, e.dir)).collect();
    if signals.len() != dw.len() {
        return Err(QmapError::Shape(format!(
            "{} signals vs {} DW entries",
            signals.len(),
            dw.len()
        )));
    }
    if dw.len() < 6 {
        return Err(QmapError::Domain(format!(
            "DTI fit needs at least 6 DW signals, got {}",
            dw.len()
        )));
    }
    let mut rows = Vec::with_capacity(dw.len());
    let mut rhs = Vec::with_capacity(dw.len());
    for (&s, &(b, g)) in signals.values.iter().zip(&dw) {
        if s <= 0.0 {
            return Err(QmapError::Numerical(format!(
                "non-positive signal {s}: log-linear fit undefined"
            )));
        }
        let mut r = design_row(g);
        for v in &mut r {
            *v *= b;
        }
        rows.push(r);
        rhs.push(-s.ln());
    }

    // normal equations A^T A d = A^T y
    let mut ata = [0.0f64; 36];
    let mut aty = [0.0f64; 6];
    for (r, &y) in rows.iter().zip(&rhs) {
        for i in 0..6 {
            aty[i] += r[i] * y;
            for j in 0..6 {
                ata[i * 6 + j] += r[i] * r[j];
            }
        }
    }
    let (eig, vecs) = jacobi_eigh(&ata, 6);
    if eig[5] <= 1e-12 * eig[0].max(1e-300) {
        return Err(QmapError::Numerical(
            "singular normal equations: degenerate gradient scheme".into(),
        ));
    }
    // d = V diag(1/lambda) V^T (A^T y)
    let mut tensor = [0.0f64; 6];
    for k in 0..6 {
        let vk = &vecs[k * 6..(k + 1) * 6];
        let proj: f64 = vk.iter().zip(&aty).map(|(v, y)| v * y).sum();
        let coef = proj / eig[k];
        for i in 0..6 {
            tensor[i] += coef * vk[i];
        }
    }

    let mut sse = 0.0;
    for (r, &y) in rows.iter().zip(&rhs) {
        let pred: f64 = r.iter().zip(&tensor).map(|(a, d)| a * d).sum();
        sse += (pred - y) * (pred - y);
    }
    Ok(DtiTensorFit {
        tensor,
        residual: (sse / rows.len() as f64).sqrt(),
    })
}

/// Symmetric 3x3 eigendecomposition; eigenvalues sorted descending with
/// orthonormal eigenvectors.
pub fn eig_sym3(tensor: &[f64; 6]) -> Eig3 {
    let [xx, yy, zz, xy, xz, yz] = *tensor;
    let m = [xx, xy, xz, xy, yy, yz, xz, yz, zz];
    let (vals, vecs) = jacobi_eigh(&m, 3);
    Eig3 {
        values: [vals[0], vals[1], vals[2]],
        vectors: [
            Vec3::new(vecs[0], vecs[1], vecs[2]),
            Vec3::new(vecs[3], vecs[4], vecs[5]),
            Vec3::new(vecs[6], vecs[7], vecs[8]),
        ],
    }
}

/// Scalar maps from descending eigenvalues. Small negative eigenvalues from
/// noisy fits are clipped to zero before the maps are formed.
pub fn dti_scalars(l1: f64, l2: f64, l3: f64) -> DtiScalars {
    assert!(
        l1 >= l2 && l2 >= l3,
        "eigenvalues must be sorted descending"
    );
    let l = [l1.max(0.0), l2.max(0.0), l3.max(0.0)];
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let ad = l[0];
    let rd = (l[1] + l[2]) / 2.0;
    let sq_sum: f64 = l.iter().map(|x| x * x).sum();
    let fa = if sq_sum == 0.0 {
        0.0
    } else {
        let dev: f64 = l.iter().map(|x| (x - md) * (x - md)).sum();
        (1.5 * dev / sq_sum).sqrt()
    };
    DtiScalars { fa, md, ad, rd }
}

/// Fit plus eigendecomposition plus scalars in one call.
pub fn dti_scalars_from_signals(signals: &SignalSet, scheme: &GradientScheme) -> Result<DtiScalars> {
    let fit = fit_dti_lls(signals, scheme)?;
    let eig = eig_sym3(&fit.tensor);
    Ok(dti_scalars(eig.values[0], eig.values[1], eig.values[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{dti_signal, sample_dti_tensor, DtiGroundTruth};
    use crate::math::{fibonacci_sphere, sample_orthonormal_triad, stream_rng};
    use crate::scheme::SchemeEntry;
    use rand::Rng;

    fn shell_scheme(b: f64, n: usize) -> GradientScheme {
        GradientScheme::new(
            fibonacci_sphere(n)
                .into_iter()
                .map(|dir| SchemeEntry { b, dir })
                .collect(),
            1,
        )
        .unwrap()
    }

    fn analytic_signals(truth: &DtiGroundTruth, scheme: &GradientScheme) -> SignalSet {
        SignalSet {
            values: scheme
                .dw_entries()
                .map(|e| dti_signal(truth, e.b, e.dir))
                .collect(),
        }
    }

    #[test]
    fn lls_recovers_noise_free_tensor_exactly() {
        let mut rng = stream_rng(31, 0);
        let scheme = shell_scheme(1000.0, 32);
        for _ in 0..20 {
            let truth = sample_dti_tensor(&mut rng);
            let fit = fit_dti_lls(&analytic_signals(&truth, &scheme), &scheme).unwrap();
            let want = truth.tensor_elements();
            for (got, want) in fit.tensor.iter().zip(&want) {
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
            assert!(fit.residual < 1e-9);
        }
    }

    #[test]
    fn lls_isotropic_signals_give_isotropic_tensor() {
        let d: f64 = 0.8e-3;
        let scheme = shell_scheme(900.0, 12);
        let signals = SignalSet {
            values: vec![(-900.0 * d).exp(); 12],
        };
        let fit = fit_dti_lls(&signals, &scheme).unwrap();
        for i in 0..3 {
            assert!((fit.tensor[i] - d).abs() < 1e-12);
        }
        for i in 3..6 {
            assert!(fit.tensor[i].abs() < 1e-12);
        }
    }

    #[test]
    fn lls_rejects_non_positive_signal() {
        let scheme = shell_scheme(700.0, 8);
        let mut values = vec![0.5; 8];
        values[3] = 0.0;
        assert!(matches!(
            fit_dti_lls(&SignalSet { values }, &scheme),
            Err(QmapError::Numerical(_))
        ));
    }

    #[test]
    fn lls_rejects_degenerate_scheme() {
        // all directions in the z=0 plane
        let entries: Vec<SchemeEntry> = (0..8)
            .map(|i| {
                let a = i as f64 * 0.7;
                SchemeEntry { b: 1000.0, dir: Vec3::new(a.cos(), a.sin(), 0.0) }
            })
            .collect();
        let scheme = GradientScheme::new(entries, 0).unwrap();
        let signals = SignalSet { values: vec![0.5; 8] };
        assert!(matches!(
            fit_dti_lls(&signals, &scheme),
            Err(QmapError::Numerical(_))
        ));
    }

    #[test]
    fn noisy_fit_error_shrinks_with_more_directions() {
        // Monte-Carlo repetition oracle: mean elementwise error over many
        // noisy fits is smaller with 32 directions than with 12
        let mut rng = stream_rng(32, 0);
        let truth = sample_dti_tensor(&mut rng);
        let want = truth.tensor_elements();
        let mean_err = |n_dirs: usize, seed: u64| -> f64 {
            let scheme = shell_scheme(1000.0, n_dirs);
            let clean: Vec<f64> = scheme
                .dw_entries()
                .map(|e| dti_signal(&truth, e.b, e.dir))
                .collect();
            let mut rng = stream_rng(seed, 1);
            let mut total = 0.0;
            let reps = 200;
            for _ in 0..reps {
                let noisy: Vec<f64> = clean
                    .iter()
                    .map(|&s| {
                        let n: f64 = rng.sample(rand_distr::StandardNormal);
                        (s + n / 50.0).max(1e-4)
                    })
                    .collect();
                let fit = fit_dti_lls(&SignalSet { values: noisy }, &scheme).unwrap();
                total += fit
                    .tensor
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            }
            total / reps as f64
        };
        let err12 = mean_err(12, 100);
        let err32 = mean_err(32, 101);
        assert!(err32 < err12, "32-dir error {err32} vs 12-dir {err12}");
    }

    #[test]
    fn eig_diagonal_and_degenerate() {
        let eig = eig_sym3(&[3e-3, 2e-3, 1e-3, 0.0, 0.0, 0.0]);
        assert!((eig.values[0] - 3e-3).abs() < 1e-18);
        assert!((eig.values[1] - 2e-3).abs() < 1e-18);
        assert!((eig.values[2] - 1e-3).abs() < 1e-18);
        assert!(eig.vectors[0].x.abs() > 1.0 - 1e-12);

        let iso = eig_sym3(&[5e-4, 5e-4, 5e-4, 0.0, 0.0, 0.0]);
        for v in iso.values {
            assert!((v - 5e-4).abs() < 1e-18);
        }
        // degenerate eigenvectors still orthonormal
        for i in 0..3 {
            assert!((iso.vectors[i].norm() - 1.0).abs() < 1e-12);
            for j in (i + 1)..3 {
                assert!(iso.vectors[i].dot(iso.vectors[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eig_recovers_rotated_construction() {
        let mut rng = stream_rng(33, 0);
        for _ in 0..20 {
            let e = sample_orthonormal_triad(&mut rng);
            let lam = [2.9e-3, 1.1e-3, 0.4e-3];
            let truth = DtiGroundTruth::new(lam, e).unwrap();
            let eig = eig_sym3(&truth.tensor_elements());
            for k in 0..3 {
                assert!((eig.values[k] - lam[k]).abs() < 1e-15);
            }
            // eigenvectors match up to sign
            for k in 0..3 {
                assert!(eig.vectors[k].dot(e[k]).abs() > 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn scalars_reference_points() {
        let iso = dti_scalars(1e-3, 1e-3, 1e-3);
        assert_eq!(iso.fa, 0.0);
        assert!((iso.md - 1e-3).abs() < 1e-18);
        assert!((iso.ad - 1e-3).abs() < 1e-18);
        assert!((iso.rd - 1e-3).abs() < 1e-18);

        let stick = dti_scalars(1e-3, 0.0, 0.0);
        assert!((stick.fa - 1.0).abs() < 1e-12);

        // hand-derived: lambda = (3,2,1)e-3
        let s = dti_scalars(3e-3, 2e-3, 1e-3);
        assert!((s.md - 2e-3).abs() < 1e-12);
        assert!((s.ad - 3e-3).abs() < 1e-12);
        assert!((s.rd - 1.5e-3).abs() < 1e-12);
        assert!((s.fa - (3.0f64 / 14.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scalars_clip_tiny_negatives() {
        let s = dti_scalars(1e-3, 1e-5, -1e-7);
        assert!(s.rd >= 0.0);
        assert!(s.fa <= 1.0);
    }

    #[test]
    fn scalars_scale_equivariant() {
        let a = dti_scalars(2.5e-3, 1.5e-3, 0.5e-3);
        let c = 3.7;
        let b = dti_scalars(c * 2.5e-3, c * 1.5e-3, c * 0.5e-3);
        assert!((b.md - c * a.md).abs() < 1e-15);
        assert!((b.ad - c * a.ad).abs() < 1e-15);
        assert!((b.rd - c * a.rd).abs() < 1e-15);
        assert!((b.fa - a.fa).abs() < 1e-12);
    }

    #[test]
    fn fit_then_scalars_round_trip() {
        let mut rng = stream_rng(34, 0);
        let scheme = shell_scheme(700.0, 30);
        for _ in 0..10 {
            let truth = sample_dti_tensor(&mut rng);
            let got = dti_scalars_from_signals(&analytic_signals(&truth, &scheme), &scheme).unwrap();
            let want = {
                let eig = eig_sym3(&truth.tensor_elements());
                dti_scalars(eig.values[0], eig.values[1], eig.values[2])
            };
            assert!((got.fa - want.fa).abs() < 1e-8);
            assert!((got.md - want.md).abs() < 1e-12);
        }
    }
}
