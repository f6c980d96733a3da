//! NODDI reference fitter: coarse grid over (icvf, isovf, odi) x Watson-axis
//! candidates, then local coordinate-descent refinement.
//!
//! The dispersed-stick integral is the expensive part, so each concentration
//! gets a per-b profile of A_ic over |g.mu| that candidate evaluations
//! interpolate. The profile is rebuilt only when the concentration changes.

use crate::error::{QmapError, Result};
use crate::forward::watson::{dispersed_stick_signal, odi_to_kappa, watson_tau1};
use crate::forward::{NoddiGroundTruth, SignalSet, D_ISO, D_PAR};
use crate::math::{fibonacci_hemisphere, Vec3};
use crate::scheme::{group_shells, GradientScheme, SHELL_TOLERANCE};

/// Grid-stage resolution and quadrature controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoddiGridSpec {
    pub n_icvf: usize,
    pub n_isovf: usize,
    pub n_odi: usize,
    /// Watson-axis candidates on a hemisphere design.
    pub n_mu: usize,
    /// Quadrature order for the dispersed-stick integral.
    pub quad_order: usize,
    /// Interpolation nodes over |g.mu| in [0,1].
    pub n_alpha_nodes: usize,
}

impl Default for NoddiGridSpec {
    fn default() -> Self {
        NoddiGridSpec {
            n_icvf: 21,
            n_isovf: 21,
            n_odi: 21,
            n_mu: 30,
            quad_order: 48,
            n_alpha_nodes: 65,
        }
    }
}

/// Fit result. `objective` is the residual sum of squares. The
/// unconstrained flags mark parameters the data cannot pin down: icvf and
/// odi lose their influence as the non-CSF fraction (or, for odi, the
/// neurite fraction) vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoddiFit {
    pub icvf: f64,
    pub isovf: f64,
    pub odi: f64,
    pub mu: Vec3,
    pub objective: f64,
    pub icvf_unconstrained: bool,
    pub odi_unconstrained: bool,
}

const DEGENERACY_THRESHOLD: f64 = 0.05;

/// Default refinement schedule: 50 coordinate-descent iterations with step
/// shrink factor 0.5 whenever no coordinate improves.
pub const DEFAULT_REFINE_STEPS: usize = 50;

struct Objective<'a> {
    signals: &'a [f64],
    gs: Vec<Vec3>,
    /// exp(-b * d_iso) per signal.
    p_iso: Vec<f64>,
    unique_bs: Vec<f64>,
    b_index: Vec<usize>,
    quad_order: usize,
    n_alpha: usize,
    /// (kappa, tau1, per-unique-b A_ic tables over |g.mu|).
    profile: Option<(f64, f64, Vec<Vec<f64>>)>,
}

impl<'a> Objective<'a> {
    fn new(signals: &'a [f64], scheme: &GradientScheme, spec: &NoddiGridSpec) -> Self {
        let mut unique_bs: Vec<f64> = Vec::new();
        let mut b_index = Vec::new();
        let mut gs = Vec::new();
        let mut p_iso = Vec::new();
        for e in scheme.dw_entries() {
            let idx = match unique_bs.iter().position(|&b| b == e.b) {
                Some(i) => i,
                None => {
                    unique_bs.push(e.b);
                    unique_bs.len() - 1
                }
            };
            b_index.push(idx);
            gs.push(e.dir);
            p_iso.push((-e.b * D_ISO).exp());
        }
        Objective {
            signals,
            gs,
            p_iso,
            unique_bs,
            b_index,
            quad_order: spec.quad_order,
            n_alpha: spec.n_alpha_nodes,
            profile: None,
        }
    }

    fn ensure_profile(&mut self, kappa: f64) -> Result<()> {
        if let Some((k, _, _)) = &self.profile {
            if *k == kappa || (k.is_infinite() && kappa.is_infinite()) {
                return Ok(());
            }
        }
        let tau1 = watson_tau1(kappa);
        let mut tables = Vec::with_capacity(self.unique_bs.len());
        for &b in &self.unique_bs {
            let mut t = Vec::with_capacity(self.n_alpha);
            for i in 0..self.n_alpha {
                let ca = i as f64 / (self.n_alpha - 1) as f64;
                t.push(dispersed_stick_signal(b, D_PAR, kappa, ca, self.quad_order)?);
            }
            tables.push(t);
        }
        self.profile = Some((kappa, tau1, tables));
        Ok(())
    }

    fn tau1(&self) -> f64 {
        self.profile.as_ref().expect("profile built").1
    }

    fn a_ic(&self, sig: usize, cos_alpha: f64) -> f64 {
        let (_, _, tables) = self.profile.as_ref().expect("profile built");
        catmull_rom(&tables[self.b_index[sig]], cos_alpha)
    }

    /// Residual sum of squares for a full parameter point. The profile must
    /// match `odi` (call `ensure_profile(odi_to_kappa(odi))` first).
    fn rss(&self, icvf: f64, isovf: f64, mu: Vec3) -> f64 {
        let tau1 = self.tau1();
        let truth = NoddiGroundTruth { icvf, isovf, odi: 0.0, mu };
        let (axial, radial) = truth.extracellular_eigenvalues(tau1);
        let mut rss = 0.0;
        for (i, &s) in self.signals.iter().enumerate() {
            let ca = self.gs[i].dot(mu).abs().min(1.0);
            let a_ic = self.a_ic(i, ca);
            let b = self.unique_bs[self.b_index[i]];
            let a_ec = (-b * (radial + (axial - radial) * ca * ca)).exp();
            let a = isovf * self.p_iso[i] + (1.0 - isovf) * (icvf * a_ic + (1.0 - icvf) * a_ec);
            rss += (a - s) * (a - s);
        }
        rss
    }
}

/// Catmull-Rom interpolation on a uniform table over [0,1]; virtual end
/// points come from quadratic extrapolation.
fn catmull_rom(table: &[f64], x: f64) -> f64 {
    let n = table.len();
    let s = (x.clamp(0.0, 1.0)) * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    let t = s - i as f64;
    let p0 = if i == 0 {
        3.0 * table[0] - 3.0 * table[1] + table[2]
    } else {
        table[i - 1]
    };
    let p1 = table[i];
    let p2 = table[i + 1];
    let p3 = if i + 2 > n - 1 {
        3.0 * table[n - 1] - 3.0 * table[n - 2] + table[n - 3]
    } else {
        table[i + 2]
    };
    let a = 2.0 * p1;
    let b = p2 - p0;
    let c = 2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3;
    let d = -p0 + 3.0 * p1 - 3.0 * p2 + p3;
    0.5 * (a + b * t + c * t * t + d * t * t * t)
}

/// Two-stage NODDI fit: exhaustive coarse grid, then deterministic
/// coordinate descent from the best cell. Requires a multi-shell scheme.
pub fn fit_noddi(
    signals: &SignalSet,
    scheme: &GradientScheme,
    grid: &NoddiGridSpec,
    refine_steps: usize,
) -> Result<NoddiFit> {
    let shells = group_shells(scheme, SHELL_TOLERANCE)?;
    if shells.n_shells() < 2 {
        return Err(QmapError::Domain(
            "NODDI needs a multi-shell scheme (>= 2 distinct b > 0)".into(),
        ));
    }
    if signals.len() != scheme.n_dw() {
        return Err(QmapError::Shape(format!(
            "{} signals vs {} DW entries",
            signals.len(),
            scheme.n_dw()
        )));
    }
    if grid.n_icvf < 2 || grid.n_isovf < 2 || grid.n_odi < 2 || grid.n_mu < 1 {
        return Err(QmapError::Config("grid axes need at least 2 points".into()));
    }

    let mut obj = Objective::new(&signals.values, scheme, grid);
    let mus = fibonacci_hemisphere(grid.n_mu);
    // |g.mu| per (candidate, signal), shared across the odi loop
    let cas: Vec<Vec<f64>> = mus
        .iter()
        .map(|mu| obj.gs.iter().map(|g| g.dot(*mu).abs().min(1.0)).collect())
        .collect();

    let frac = |i: usize, n: usize| i as f64 / (n - 1) as f64;
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0, mus[0]); // (rss, icvf, isovf, odi, mu)

    for oi in 0..grid.n_odi {
        let odi = frac(oi, grid.n_odi);
        obj.ensure_profile(odi_to_kappa(odi)?)?;
        let tau1 = obj.tau1();
        for (mi, mu) in mus.iter().enumerate() {
            let a_ics: Vec<f64> = (0..obj.signals.len())
                .map(|s| obj.a_ic(s, cas[mi][s]))
                .collect();
            for ii in 0..grid.n_icvf {
                let icvf = frac(ii, grid.n_icvf);
                let truth = NoddiGroundTruth { icvf, isovf: 0.0, odi, mu: *mu };
                let (axial, radial) = truth.extracellular_eigenvalues(tau1);
                // tissue prediction B and the residual quadratic in isovf:
                // rss(v) = q0 + 2 v q1 + v^2 q2 with A = B + v (P - B)
                let (mut q0, mut q1, mut q2) = (0.0, 0.0, 0.0);
                for (s, &sig) in obj.signals.iter().enumerate() {
                    let ca = cas[mi][s];
                    let b = obj.unique_bs[obj.b_index[s]];
                    let a_ec = (-b * (radial + (axial - radial) * ca * ca)).exp();
                    let tissue = icvf * a_ics[s] + (1.0 - icvf) * a_ec;
                    let r = tissue - sig;
                    let pb = obj.p_iso[s] - tissue;
                    q0 += r * r;
                    q1 += r * pb;
                    q2 += pb * pb;
                }
                for vi in 0..grid.n_isovf {
                    let v = frac(vi, grid.n_isovf);
                    let rss = q0 + 2.0 * v * q1 + v * v * q2;
                    if rss < best.0 {
                        best = (rss, icvf, v, odi, *mu);
                    }
                }
            }
        }
    }

    // stage 2: coordinate descent on (icvf, isovf, odi, theta, phi)
    let (mut rss, mut icvf, mut isovf, mut odi, mu) = best;
    let mut theta = mu.z.clamp(-1.0, 1.0).acos();
    let mut phi = mu.y.atan2(mu.x);
    let sphere = |theta: f64, phi: f64| {
        Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    };
    let mut step_frac = 1.0 / (grid.n_icvf - 1) as f64;
    let mut step_ang = (2.0 * std::f64::consts::PI / grid.n_mu as f64).sqrt();

    for _ in 0..refine_steps {
        let mut improved = false;
        for coord in 0..5 {
            for dir in [-1.0, 1.0] {
                let (mut ic, mut iv, mut od, mut th, mut ph) = (icvf, isovf, odi, theta, phi);
                match coord {
                    0 => ic = (ic + dir * step_frac).clamp(0.0, 1.0),
                    1 => iv = (iv + dir * step_frac).clamp(0.0, 1.0),
                    2 => od = (od + dir * step_frac).clamp(0.0, 1.0),
                    3 => th = th + dir * step_ang,
                    _ => ph = ph + dir * step_ang,
                }
                obj.ensure_profile(odi_to_kappa(od)?)?;
                let cand = obj.rss(ic, iv, sphere(th, ph));
                if cand < rss {
                    rss = cand;
                    icvf = ic;
                    isovf = iv;
                    odi = od;
                    theta = th;
                    phi = ph;
                    improved = true;
                }
            }
        }
        if !improved {
            step_frac *= 0.5;
            step_ang *= 0.5;
        }
    }

    let mut mu = sphere(theta, phi);
    if mu.z < 0.0 {
        mu = mu.scale(-1.0); // antipodal convention: report the z >= 0 axis
    }
    let tissue = 1.0 - isovf;
    Ok(NoddiFit {
        icvf,
        isovf,
        odi,
        mu,
        objective: rss,
        icvf_unconstrained: tissue <= DEGENERACY_THRESHOLD,
        odi_unconstrained: tissue <= DEGENERACY_THRESHOLD || icvf <= DEGENERACY_THRESHOLD,
    })
}
