//! Gradient schemes: parsing, q-space normalization, shell partitioning, and
//! condition-number-guided direction subset selection.

use crate::error::{QmapError, Result};
use crate::math::{jacobi_eigh, stream_rng, Vec3};
use rand::seq::index::sample as index_sample;

/// One diffusion-weighted acquisition: b-value (s/mm^2) and unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeEntry {
    pub b: f64,
    pub dir: Vec3,
}

/// An acquisition protocol: ordered diffusion-weighted entries plus the
/// number of b=0 acquisitions.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    entries: Vec<SchemeEntry>,
    n_b0: usize,
}

impl GradientScheme {
    /// Validates b >= 0 and |dir| = 1 within 1e-6 for every entry.
    pub fn new(entries: Vec<SchemeEntry>, n_b0: usize) -> Result<Self> {
        if entries.is_empty() && n_b0 == 0 {
            return Err(QmapError::Domain("scheme has no acquisitions".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.b < 0.0 || !e.b.is_finite() {
                return Err(QmapError::Domain(format!("entry {i}: negative or non-finite b")));
            }
            if (e.dir.norm() - 1.0).abs() > 1e-6 {
                return Err(QmapError::Domain(format!("entry {i}: direction is not unit length")));
            }
        }
        Ok(GradientScheme { entries, n_b0 })
    }

    pub fn entries(&self) -> &[SchemeEntry] {
        &self.entries
    }

    pub fn n_b0(&self) -> usize {
        self.n_b0
    }

    /// Diffusion-weighted entries (b > 0) in acquisition order.
    pub fn dw_entries(&self) -> impl Iterator<Item = &SchemeEntry> {
        self.entries.iter().filter(|e| e.b > 0.0)
    }

    pub fn n_dw(&self) -> usize {
        self.dw_entries().count()
    }

    pub fn max_b(&self) -> f64 {
        self.dw_entries().map(|e| e.b).fold(0.0, f64::max)
    }

    /// Scheme-file text in the same format `parse_scheme` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for _ in 0..self.n_b0 {
            s.push_str("0 0 0 0\n");
        }
        for e in &self.entries {
            s.push_str(&format!("{} {:.6} {:.6} {:.6}\n", e.b, e.dir.x, e.dir.y, e.dir.z));
        }
        s
    }
}

/// A single acquisition mapped into normalized q-space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QPoint {
    /// Coordinates in [-1,1]^3 with |coords| <= 1 (+1e-9 slack).
    pub coords: Vec3,
    /// Index into the diffusion-weighted signal list this point carries.
    pub signal_index: usize,
}

/// Shells of a multi-shell scheme, ascending by representative b-value.
///
/// Member indices address the diffusion-weighted entry list (the same
/// indexing signals and q-points use).
#[derive(Debug, Clone, PartialEq)]
pub struct ShellPartition {
    pub shells: Vec<Shell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shell {
    pub b: f64,
    pub members: Vec<usize>,
}

impl ShellPartition {
    pub fn n_shells(&self) -> usize {
        self.shells.len()
    }
}

/// Parses scheme-file text: one `b gx gy gz` row per acquisition,
/// whitespace-separated; `#` starts a comment; b=0 rows may omit the vector
/// or give zeros. Directions are renormalized to unit length.
pub fn parse_scheme(text: &str) -> Result<GradientScheme> {
    let mut entries = Vec::new();
    let mut n_b0 = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| QmapError::Parse { line: lineno + 1, msg: msg.into() };
        let b: f64 = fields[0]
            .parse()
            .map_err(|_| err("b-value is not a number"))?;
        if !b.is_finite() || b < 0.0 {
            return Err(err("negative or non-finite b-value"));
        }
        if b == 0.0 {
            // vector optional for b=0; if present it is ignored
            if fields.len() != 1 && fields.len() != 4 {
                return Err(err("expected `0` or `0 gx gy gz`"));
            }
            n_b0 += 1;
            continue;
        }
        if fields.len() != 4 {
            return Err(err("expected 4 fields `b gx gy gz`"));
        }
        let mut g = [0.0f64; 3];
        for (k, f) in fields[1..].iter().enumerate() {
            g[k] = f.parse().map_err(|_| err("gradient component is not a number"))?;
        }
        let dir = Vec3::from(g)
            .normalized()
            .ok_or_else(|| err("zero-length direction vector for b > 0"))?;
        entries.push(SchemeEntry { b, dir });
    }
    GradientScheme::new(entries, n_b0)
}

/// Maps diffusion-weighted entries into q-space: coords = sqrt(b/b_norm)*dir.
/// b=0 acquisitions never produce a point.
pub fn normalize_qpoints(scheme: &GradientScheme, b_norm: f64) -> Result<Vec<QPoint>> {
    if b_norm <= 0.0 {
        return Err(QmapError::Domain("b_norm must be positive".into()));
    }
    let mut points = Vec::with_capacity(scheme.n_dw());
    for (signal_index, e) in scheme.dw_entries().enumerate() {
        if e.b > b_norm {
            return Err(QmapError::Domain(format!(
                "b={} exceeds normalization b={}; raise b_norm",
                e.b, b_norm
            )));
        }
        let r = (e.b / b_norm).sqrt();
        points.push(QPoint { coords: e.dir.scale(r), signal_index });
    }
    Ok(points)
}

/// Greedy single-linkage grouping of DW b-values into shells.
/// Representative b is the mean of the members; shells sorted ascending.
pub fn group_shells(scheme: &GradientScheme, tolerance: f64) -> Result<ShellPartition> {
    if tolerance < 0.0 {
        return Err(QmapError::Domain("tolerance must be non-negative".into()));
    }
    let mut dw: Vec<(usize, f64)> = scheme.dw_entries().map(|e| e.b).enumerate().collect();
    dw.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut shells: Vec<Shell> = Vec::new();
    let mut current: Vec<(usize, f64)> = Vec::new();
    for (idx, b) in dw {
        if let Some(&(_, last_b)) = current.last() {
            if b - last_b > tolerance {
                shells.push(finish_shell(&mut current));
            }
        }
        current.push((idx, b));
    }
    if !current.is_empty() {
        shells.push(finish_shell(&mut current));
    }
    Ok(ShellPartition { shells })
}

fn finish_shell(members: &mut Vec<(usize, f64)>) -> Shell {
    let b = members.iter().map(|&(_, b)| b).sum::<f64>() / members.len() as f64;
    let mut idx: Vec<usize> = members.iter().map(|&(i, _)| i).collect();
    idx.sort_unstable();
    members.clear();
    Shell { b, members: idx }
}

/// Default shell-grouping tolerance (s/mm^2); protocols here have
/// well-separated shells.
pub const SHELL_TOLERANCE: f64 = 50.0;

/// Condition number of the 6-column tensor design matrix with one row
/// (gx^2, gy^2, gz^2, 2 gx gy, 2 gx gz, 2 gy gz) per DW direction: the ratio
/// of largest to smallest singular value. Rank-deficient designs report
/// +infinity.
pub fn condition_number(scheme: &GradientScheme) -> Result<f64> {
    let rows: Vec<[f64; 6]> = scheme.dw_entries().map(|e| design_row(e.dir)).collect();
    if rows.len() < 6 {
        return Err(QmapError::Domain(format!(
            "condition number needs at least 6 DW directions, got {}",
            rows.len()
        )));
    }
    // singular values of A via the spectrum of A^T A
    let mut ata = [0.0f64; 36];
    for r in &rows {
        for i in 0..6 {
            for j in 0..6 {
                ata[i * 6 + j] += r[i] * r[j];
            }
        }
    }
    let (eig, _) = jacobi_eigh(&ata, 6);
    let max = eig[0].max(0.0);
    let min = eig[5];
    if min <= 1e-12 * max {
        return Ok(f64::INFINITY);
    }
    Ok((max / min).sqrt())
}

/// Tensor design-matrix row for one unit gradient direction.
pub fn design_row(g: Vec3) -> [f64; 6] {
    [
        g.x * g.x,
        g.y * g.y,
        g.z * g.z,
        2.0 * g.x * g.y,
        2.0 * g.x * g.z,
        2.0 * g.y * g.z,
    ]
}

/// Randomized per-shell subset selection: draws `n_candidates` random subsets
/// of `k` directions per shell and keeps the combination with the lowest
/// condition number. Deterministic for a fixed seed.
pub fn select_subset(
    scheme: &GradientScheme,
    k: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<GradientScheme> {
    if n_candidates == 0 {
        return Err(QmapError::Domain("n_candidates must be at least 1".into()));
    }
    let shells = group_shells(scheme, SHELL_TOLERANCE)?;
    for shell in &shells.shells {
        if k > shell.members.len() {
            return Err(QmapError::Domain(format!(
                "k={} exceeds shell size {} (b={})",
                k,
                shell.members.len(),
                shell.b
            )));
        }
    }
    let dw: Vec<SchemeEntry> = scheme.dw_entries().copied().collect();
    if shells.shells.iter().all(|s| s.members.len() == k) {
        return GradientScheme::new(dw, scheme.n_b0());
    }

    let mut rng = stream_rng(seed, 0);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..n_candidates {
        let mut picked: Vec<usize> = Vec::with_capacity(k * shells.n_shells());
        for shell in &shells.shells {
            for j in index_sample(&mut rng, shell.members.len(), k) {
                picked.push(shell.members[j]);
            }
        }
        picked.sort_unstable();
        let entries: Vec<SchemeEntry> = picked.iter().map(|&i| dw[i]).collect();
        let candidate = GradientScheme::new(entries, scheme.n_b0())?;
        let cn = condition_number(&candidate)?;
        let better = match &best {
            Some((best_cn, _)) => cn < *best_cn,
            None => true,
        };
        if better {
            best = Some((cn, picked));
        }
    }
    let (_, picked) = best.expect("n_candidates >= 1 guarantees a candidate");
    GradientScheme::new(picked.iter().map(|&i| dw[i]).collect(), scheme.n_b0())
}
