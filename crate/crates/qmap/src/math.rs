//! Small numerical utilities: 3-vectors, symmetric eigensolvers, quadrature,
//! quasi-uniform sphere point sets, and seeded RNG streams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 3-vector with the handful of operations the simulators need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    /// Unit vector in the same direction; `None` when the norm is ~0.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n < 1e-12 {
            None
        } else {
            Some(self.scale(1.0 / n))
        }
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

/// Uniform draw from the unit sphere surface (normalized Gaussian triple).
pub fn sample_unit_sphere<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if let Some(u) = v.normalized() {
            return u;
        }
    }
}

/// Random right-handed orthonormal triad (Haar-uniform rotation columns).
pub fn sample_orthonormal_triad<R: Rng + ?Sized>(rng: &mut R) -> [Vec3; 3] {
    let e1 = sample_unit_sphere(rng);
    let e2 = loop {
        let v = sample_unit_sphere(rng);
        let perp = v.sub(e1.scale(v.dot(e1)));
        if let Some(u) = perp.normalized() {
            break u;
        }
    };
    let e3 = e1.cross(e2);
    [e1, e2, e3]
}

/// Two unit vectors completing `axis` to an orthonormal triad (deterministic).
pub fn orthonormal_complement(axis: Vec3) -> (Vec3, Vec3) {
    let pick = if axis.x.abs() < 0.9 {
        Vec3::new(1.0, 0.0, 0.0)
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    };
    let u = pick
        .sub(axis.scale(pick.dot(axis)))
        .normalized()
        .expect("axis must be a unit vector");
    let v = axis.cross(u);
    (u, v)
}

/// `n` quasi-uniform points on the full sphere (golden-angle lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// `n` quasi-uniform points on the upper hemisphere (z >= 0).
pub fn fibonacci_hemisphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Independent, reproducible RNG stream `stream` derived from `seed`.
///
/// Every parallel unit of work (proton block, dataset sample) gets its own
/// stream so results do not depend on worker count or schedule.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.into());
    rng
}

/// Jacobi eigendecomposition of a symmetric matrix (row-major `n*n` slice).
///
/// Returns eigenvalues (descending) and matching orthonormal eigenvectors as
/// rows of the returned matrix. Cyclic sweeps until off-diagonal mass is at
/// machine level; sizes here are 3 or 6, so this converges in a few sweeps.
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    // v starts as identity; accumulates rotations (rows are eigenvectors).
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let idx = |r: usize, c: usize| r * n + c;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[idx(p, q)] * m[idx(p, q)];
            }
        }
        let scale: f64 = (0..n).map(|i| m[idx(i, i)].abs()).sum::<f64>().max(1e-300);
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[idx(k, p)];
                    let mkq = m[idx(k, q)];
                    m[idx(k, p)] = c * mkp - s * mkq;
                    m[idx(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[idx(p, k)];
                    let mqk = m[idx(q, k)];
                    m[idx(p, k)] = c * mpk - s * mqk;
                    m[idx(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vpk = v[idx(p, k)];
                    let vqk = v[idx(q, k)];
                    v[idx(p, k)] = c * vpk - s * vqk;
                    v[idx(q, k)] = s * vpk + c * vqk;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[idx(j, j)].partial_cmp(&m[idx(i, i)]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| m[idx(i, i)]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (row, &i) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs[row * n + k] = v[idx(i, k)];
        }
    }
    (eigvals, eigvecs)
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Newton on the recurrence).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped onto [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (
        xs.iter().map(|&x| mid + half * x).collect(),
        ws.iter().map(|&w| w * half).collect(),
    )
}

/// Adaptive Simpson quadrature on [a, b] with relative tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
        }
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(fa, fm, fb, a, b);
    let eps = tol * whole.abs().max(1e-300);
    recurse(f, a, b, fa, fm, fb, whole, eps, 60)
}

/// Error function, Abramowitz & Stegun 7.1.26 (|err| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_diagonal() {
        let a = [3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        let (vals, _) = jacobi_eigh(&a, 3);
        assert!((vals[0] - 3.0).abs() < 1e-14);
        assert!((vals[1] - 2.0).abs() < 1e-14);
        assert!((vals[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let mut rng = stream_rng(7, 0);
        for _ in 0..20 {
            let mut a = vec![0.0; 36];
            for i in 0..6 {
                for j in 0..=i {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    a[i * 6 + j] = v;
                    a[j * 6 + i] = v;
                }
            }
            let (vals, vecs) = jacobi_eigh(&a, 6);
            // rebuild sum(lambda_i v_i v_i^T) and compare
            let mut rec = vec![0.0; 36];
            for k in 0..6 {
                for i in 0..6 {
                    for j in 0..6 {
                        rec[i * 6 + j] += vals[k] * vecs[k * 6 + i] * vecs[k * 6 + j];
                    }
                }
            }
            let err: f64 = rec
                .iter()
                .zip(a.iter())
                .map(|(r, o)| (r - o).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "reconstruction error {err}");
            for k in 1..6 {
                assert!(vals[k - 1] >= vals[k]);
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (xs, ws) = gauss_legendre(8);
        // order-8 rule is exact to degree 15
        let int_x14: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.powi(14)).sum();
        assert!((int_x14 - 2.0 / 15.0).abs() < 1e-13);
        let total: f64 = ws.iter().sum();
        assert!((total - 2.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_simpson_matches_closed_forms() {
        let v = adaptive_simpson(&|t: f64| t * t, 0.0, 1.0, 1e-12);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let v = adaptive_simpson(&|t: f64| (-t).exp(), 0.0, 5.0, 1e-12);
        assert!((v - (1.0 - (-5.0f64).exp())).abs() < 1e-10);
    }

    #[test]
    fn fibonacci_sphere_is_balanced() {
        let pts = fibonacci_sphere(200);
        let mean = pts
            .iter()
            .fold(Vec3::ZERO, |acc, p| acc.add(*p))
            .scale(1.0 / 200.0);
        assert!(mean.norm() < 0.02);
        for p in &pts {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn triads_are_orthonormal_and_right_handed() {
        let mut rng = stream_rng(3, 1);
        for _ in 0..50 {
            let [e1, e2, e3] = sample_orthonormal_triad(&mut rng);
            assert!(e1.dot(e2).abs() < 1e-12);
            assert!(e1.dot(e3).abs() < 1e-12);
            assert!(e2.dot(e3).abs() < 1e-12);
            assert!((e1.cross(e2).sub(e3)).norm() < 1e-12);
        }
    }

    #[test]
    fn erf_reference_points() {
        assert!((erf(0.0)).abs() < 1.5e-7);
        assert!((erf(1.0) - 0.8427007929).abs() < 1.5e-7);
        assert!((normal_cdf(1.96) - 0.9750021).abs() < 1e-5);
    }

    #[test]
    fn stream_rngs_are_independent_and_reproducible() {
        let a: Vec<u32> = {
            let mut r = stream_rng(42, 0);
            (0..4).map(|_| r.random()).collect()
        };
        let a2: Vec<u32> = {
            let mut r = stream_rng(42, 0);
            (0..4).map(|_| r.random()).collect()
        };
        let b: Vec<u32> = {
            let mut r = stream_rng(42, 1);
            (0..4).map(|_| r.random()).collect()
        };
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }
}
