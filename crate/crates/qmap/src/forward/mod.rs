//! Ground-truth sampling, analytic signal models, and Monte-Carlo
//! random-walk simulation for DTI and NODDI tissue.

pub mod dataset;
pub mod mc;
pub mod watson;

pub use dataset::{encode_dataset, generate_dataset, simulate_samples, RawSample};
pub use mc::{mc_simulate, SimConfig, TissueModel};
pub use watson::{
    dispersed_stick_signal, odi_to_kappa, watson_sample, watson_tau1, WatsonMoments,
    DEFAULT_QUAD_ORDER,
};

use crate::error::{QmapError, Result};
use crate::math::{sample_orthonormal_triad, sample_unit_sphere, Vec3};
use crate::scheme::{GradientScheme, SchemeEntry};
use rand::Rng;

/// Largest principal diffusivity of the DTI prior (mm^2/s).
pub const D1_MAX: f64 = 3.5e-3;
/// Intracellular parallel diffusivity (mm^2/s).
pub const D_PAR: f64 = 1.7e-3;
/// CSF isotropic diffusivity (mm^2/s).
pub const D_ISO: f64 = 3.0e-3;
/// q-space normalization b-values (s/mm^2).
pub const DTI_B_NORM: f64 = 1300.0;
pub const NODDI_B_NORM: f64 = 2300.0;

/// DTI prior ranges: b in [600,1300] s/mm^2, 30..=80 directions.
pub const DTI_B_RANGE: (f64, f64) = (600.0, 1300.0);
pub const DTI_N_RANGE: (usize, usize) = (30, 80);
/// NODDI prior ranges per shell.
pub const NODDI_B_RANGES: [(f64, f64); 3] = [(200.0, 400.0), (500.0, 900.0), (1700.0, 2300.0)];
pub const NODDI_N_RANGES: [(usize, usize); 3] = [(5, 10), (25, 50), (50, 100)];

/// Diffusion tensor ground truth: eigenvalues plus orthonormal eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtiGroundTruth {
    pub d: [f64; 3],
    pub e: [Vec3; 3],
}

impl DtiGroundTruth {
    /// Validates 0 <= d2,d3 <= d1 <= 3.5e-3 and orthonormality within 1e-6.
    pub fn new(d: [f64; 3], e: [Vec3; 3]) -> Result<Self> {
        if !(d[0] >= 0.0 && d[1] >= 0.0 && d[2] >= 0.0) {
            return Err(QmapError::Domain("negative diffusivity".into()));
        }
        if d[1] > d[0] || d[2] > d[0] || d[0] > D1_MAX * (1.0 + 1e-12) {
            return Err(QmapError::Domain(format!(
                "diffusivities out of order or above {D1_MAX}: {d:?}"
            )));
        }
        for i in 0..3 {
            if (e[i].norm() - 1.0).abs() > 1e-6 {
                return Err(QmapError::Domain("eigenvector not unit length".into()));
            }
            for j in (i + 1)..3 {
                if e[i].dot(e[j]).abs() > 1e-6 {
                    return Err(QmapError::Domain("eigenvectors not orthogonal".into()));
                }
            }
        }
        Ok(DtiGroundTruth { d, e })
    }

    /// Quadratic form g^T D g for a unit vector g.
    pub fn quadratic_form(&self, g: Vec3) -> f64 {
        (0..3).map(|i| self.d[i] * g.dot(self.e[i]).powi(2)).sum()
    }

    /// The six unique tensor elements (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
    pub fn tensor_elements(&self) -> [f64; 6] {
        let mut m = [[0.0f64; 3]; 3];
        for k in 0..3 {
            let v = self.e[k].as_array();
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += self.d[k] * v[i] * v[j];
                }
            }
        }
        [m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2]]
    }
}

/// NODDI ground truth: compartment fractions, dispersion, Watson mean axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoddiGroundTruth {
    pub icvf: f64,
    pub isovf: f64,
    pub odi: f64,
    pub mu: Vec3,
}

impl NoddiGroundTruth {
    pub fn new(icvf: f64, isovf: f64, odi: f64, mu: Vec3) -> Result<Self> {
        for (name, v) in [("icvf", icvf), ("isovf", isovf), ("odi", odi)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(QmapError::Domain(format!("{name}={v} outside [0,1]")));
            }
        }
        if (mu.norm() - 1.0).abs() > 1e-6 {
            return Err(QmapError::Domain("mu is not unit length".into()));
        }
        Ok(NoddiGroundTruth { icvf, isovf, odi, mu })
    }

    /// Apparent extracellular tensor eigenvalues (axial along mu, radial),
    /// built in two stages: tortuosity d_perp' = d_par * (1 - icvf), then
    /// Watson dispersion with the second moment tau1.
    pub fn extracellular_eigenvalues(&self, tau1: f64) -> (f64, f64) {
        let d_par_app = D_PAR;
        let d_perp_app = D_PAR * (1.0 - self.icvf);
        let axial = d_perp_app + (d_par_app - d_perp_app) * tau1;
        let radial = d_perp_app + (d_par_app - d_perp_app) * (1.0 - tau1) / 2.0;
        (axial, radial)
    }
}

/// Normalized diffusion-weighted signals S/S0 aligned with the scheme's
/// DW entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet {
    pub values: Vec<f64>,
}

impl SignalSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Analytic DTI signal: exp(-b * g^T D g).
pub fn dti_signal(truth: &DtiGroundTruth, b: f64, g: Vec3) -> f64 {
    debug_assert!(b >= 0.0);
    (-b * truth.quadratic_form(g)).exp()
}

/// Analytic NODDI signal: CSF + Watson-dispersed sticks + hindered tensor.
///
/// A = isovf*exp(-b*d_iso)
///   + (1-isovf) * [ icvf*A_ic + (1-icvf)*A_ec ]
/// with A_ic the dispersed-stick spherical quadrature and A_ec the
/// dispersion-averaged extracellular tensor.
pub fn noddi_signal(truth: &NoddiGroundTruth, b: f64, g: Vec3, order: usize) -> Result<f64> {
    if b < 0.0 {
        return Err(QmapError::Domain("negative b".into()));
    }
    let moments = WatsonMoments::from_odi(truth.odi)?;
    let cos_alpha = g.dot(truth.mu).abs().min(1.0);
    let a_iso = (-b * D_ISO).exp();
    let a_ic = dispersed_stick_signal(b, D_PAR, moments.kappa, cos_alpha, order)?;
    let (axial, radial) = truth.extracellular_eigenvalues(moments.tau1);
    let a_ec = (-b * (radial + (axial - radial) * cos_alpha * cos_alpha)).exp();
    Ok(truth.isovf * a_iso
        + (1.0 - truth.isovf) * (truth.icvf * a_ic + (1.0 - truth.icvf) * a_ec))
}

/// Draws a DTI tensor from the prior: d1 ~ U(0, 3.5e-3), d2,d3 ~ U(0, d1),
/// random orthonormal eigenvector triad.
pub fn sample_dti_tensor<R: Rng + ?Sized>(rng: &mut R) -> DtiGroundTruth {
    let d1 = rng.random::<f64>() * D1_MAX;
    let d2 = rng.random::<f64>() * d1;
    let d3 = rng.random::<f64>() * d1;
    let e = sample_orthonormal_triad(rng);
    DtiGroundTruth { d: [d1, d2, d3], e }
}

/// Random single-shell scheme: b ~ U(b_range), n ~ U{n_range}, directions
/// quasi-uniform on the sphere under a random rotation. One b=0 acquisition.
pub fn sample_dti_scheme<R: Rng + ?Sized>(
    rng: &mut R,
    b_range: (f64, f64),
    n_range: (usize, usize),
) -> GradientScheme {
    let b = rng.random_range(b_range.0..=b_range.1);
    let n = rng.random_range(n_range.0..=n_range.1);
    let entries = rotated_directions(rng, n)
        .into_iter()
        .map(|dir| SchemeEntry { b, dir })
        .collect();
    GradientScheme::new(entries, 1).expect("constructed entries are valid")
}

/// DTI training draw: tensor plus its own random acquisition scheme.
pub fn sample_dti_truth<R: Rng + ?Sized>(
    rng: &mut R,
    b_range: (f64, f64),
    n_range: (usize, usize),
) -> (DtiGroundTruth, GradientScheme) {
    let truth = sample_dti_tensor(rng);
    let scheme = sample_dti_scheme(rng, b_range, n_range);
    (truth, scheme)
}

/// Draws NODDI fractions uniformly on [0,1] and a uniform Watson axis.
pub fn sample_noddi_params<R: Rng + ?Sized>(rng: &mut R) -> NoddiGroundTruth {
    NoddiGroundTruth {
        icvf: rng.random(),
        isovf: rng.random(),
        odi: rng.random(),
        mu: sample_unit_sphere(rng),
    }
}

/// Random three-shell scheme from the NODDI protocol prior.
pub fn sample_noddi_scheme<R: Rng + ?Sized>(rng: &mut R) -> GradientScheme {
    let mut entries = Vec::new();
    for (b_range, n_range) in NODDI_B_RANGES.iter().zip(NODDI_N_RANGES.iter()) {
        let b = rng.random_range(b_range.0..=b_range.1);
        let n = rng.random_range(n_range.0..=n_range.1);
        entries.extend(
            rotated_directions(rng, n)
                .into_iter()
                .map(|dir| SchemeEntry { b, dir }),
        );
    }
    GradientScheme::new(entries, 1).expect("constructed entries are valid")
}

/// NODDI training draw: parameters plus a random three-shell scheme.
pub fn sample_noddi_truth<R: Rng + ?Sized>(rng: &mut R) -> (NoddiGroundTruth, GradientScheme) {
    let truth = sample_noddi_params(rng);
    let scheme = sample_noddi_scheme(rng);
    (truth, scheme)
}

fn rotated_directions<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Vec3> {
    let [r1, r2, r3] = sample_orthonormal_triad(rng);
    crate::math::fibonacci_sphere(n)
        .into_iter()
        .map(|p| r1.scale(p.x).add(r2.scale(p.y)).add(r3.scale(p.z)))
        .collect()
}
