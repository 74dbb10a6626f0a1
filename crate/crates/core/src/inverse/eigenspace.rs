//! Flux independence within eigenvalue clusters and the matching of two
//! factorizations of a sampled kernel K(x, y) = F(x)·F̃(y) = G(x)·G̃(y).

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::elliptic::SpectralData;
use crate::error::{Error, Result};
use crate::mesh::BoundaryTrace;

/// Relative pivot threshold below which samples count as rank deficient.
pub const RANK_RTOL: f64 = 1e-10;

/// Smallest singular value of the unit-normalized traces as vectors in the
/// discrete boundary inner product (weights = boundary quadrature weights).
pub fn traces_sigma_min(traces: &[BoundaryTrace], weights: &[f64]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::invalid("no traces"));
    }
    let nb = weights.len();
    let mut m = DMatrix::zeros(nb, traces.len());
    for (j, t) in traces.iter().enumerate() {
        if t.values.len() != nb {
            return Err(Error::invalid("trace length does not match the boundary"));
        }
        let col: Vec<f64> = t.values.iter().zip(weights).map(|(v, w)| v * w.sqrt()).collect();
        let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Ok(0.0);
        }
        for b in 0..nb {
            m[(b, j)] = col[b] / n;
        }
    }
    Ok(m.singular_values().iter().cloned().fold(f64::INFINITY, f64::min))
}

/// σ_min of the flux traces of cluster `k` of `spec`.
pub fn flux_independence_check(spec: &SpectralData, weights: &[f64], k: usize) -> Result<f64> {
    let clusters = spec.clusters();
    let range = clusters
        .get(k)
        .ok_or_else(|| Error::invalid(format!("cluster {k} out of range ({} clusters)", clusters.len())))?;
    traces_sigma_min(&spec.flux_traces[range.clone()], weights)
}

/// Smallest per-cluster σ_min over every cluster that contains one of the
/// first `eigen_count` eigenvalues.
pub fn flux_independence_min(spec: &SpectralData, weights: &[f64], eigen_count: usize) -> Result<f64> {
    if eigen_count == 0 || eigen_count > spec.len() {
        return Err(Error::invalid(format!("need 1 ≤ eigen_count ≤ {} computed eigenvalues", spec.len())));
    }
    let clusters = spec.clusters();
    let last = clusters.iter().position(|c| c.end >= eigen_count).unwrap_or(clusters.len() - 1);
    let mut worst = f64::INFINITY;
    for k in 0..=last {
        worst = worst.min(flux_independence_check(spec, weights, k)?);
    }
    Ok(worst)
}

/// Result of `match_eigenspaces`.
#[derive(Clone, Debug)]
pub struct EigenspaceMatch {
    /// F = T G.
    pub t: DMatrix<f64>,
    /// Selected boundary sample indices y_1, …, y_m.
    pub boundary_points: Vec<usize>,
    /// Interior sample indices used to verify F = T G.
    pub interior_points: Vec<usize>,
    /// ‖TᵀT − I‖_F.
    pub orthogonality_defect: f64,
    pub condition_number: f64,
    /// max |F − T G| / max |F| over the interior samples.
    pub holdout_error: f64,
}

impl EigenspaceMatch {
    pub fn to_json(&self) -> Value {
        let rows: Vec<Vec<f64>> = (0..self.t.nrows()).map(|i| self.t.row(i).iter().copied().collect()).collect();
        json!({
            "t": rows,
            "boundary_points": self.boundary_points,
            "orthogonality_defect": self.orthogonality_defect,
            "condition_number": self.condition_number,
            "holdout_error": self.holdout_error,
        })
    }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| top > 0.0 && s > RANK_RTOL * top).count()
}

/// Greedy column pivoting: picks m columns of `ft` (m × ny) whose residual
/// norm after projecting out the previous picks is largest, i.e. the
/// largest growth of |det| at every step.
fn pivot_columns(ft: &DMatrix<f64>, m: usize) -> Result<Vec<usize>> {
    let mut work = ft.clone();
    let mut picked = Vec::with_capacity(m);
    let mut first = 0.0;
    for step in 0..m {
        let (best, norm) = (0..work.ncols())
            .filter(|c| !picked.contains(c))
            .map(|c| (c, work.column(c).norm()))
            .fold((usize::MAX, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        if step == 0 {
            first = norm;
        }
        if best == usize::MAX || !(norm > RANK_RTOL * first) || first == 0.0 {
            return Err(Error::identification(
                "eigenspace",
                format!("boundary samples have rank {step} < {m}: the flux traces are linearly dependent"),
            ));
        }
        let q = work.column(best) / norm;
        let proj = q.transpose() * &work;
        work -= &q * proj;
        picked.push(best);
    }
    Ok(picked)
}

/// Recovers T with F(x) = T G(x) from two factorizations sampled on
/// interior points (columns of `f`, `g`: m × nx) and boundary points
/// (columns of `f_tilde`, `g_tilde`: m × ny). Boundary points are chosen by
/// greedy pivoting on F̃, then T = Q_F̃⁻¹ Q_G̃ with Q[i][j] = F̃_j(y_i).
pub fn match_eigenspaces(f: &DMatrix<f64>, f_tilde: &DMatrix<f64>, g: &DMatrix<f64>, g_tilde: &DMatrix<f64>, m: usize) -> Result<EigenspaceMatch> {
    if f.nrows() != m || g.nrows() != m || f_tilde.nrows() != m || g_tilde.nrows() != m {
        return Err(Error::invalid("factor row counts must equal m"));
    }
    if f.ncols() != g.ncols() || f_tilde.ncols() != g_tilde.ncols() {
        return Err(Error::invalid("factorizations are sampled on different points"));
    }
    if numerical_rank(f) < m || numerical_rank(g) < m {
        return Err(Error::identification("eigenspace", "interior samples are rank deficient"));
    }
    let picked = pivot_columns(f_tilde, m)?;
    let qf = DMatrix::from_fn(m, m, |i, j| f_tilde[(j, picked[i])]);
    let qg = DMatrix::from_fn(m, m, |i, j| g_tilde[(j, picked[i])]);
    let t = qf
        .clone()
        .lu()
        .solve(&qg)
        .ok_or_else(|| Error::identification("eigenspace", "selected boundary matrix is singular"))?;
    let sv = t.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let defect = (t.transpose() * &t - DMatrix::identity(m, m)).norm();
    let diff = f - &t * g;
    let fmax = f.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let holdout = diff.iter().fold(0.0f64, |a, b| a.max(b.abs())) / fmax.max(f64::MIN_POSITIVE);
    Ok(EigenspaceMatch {
        t,
        boundary_points: picked,
        interior_points: (0..f.ncols()).collect(),
        orthogonality_defect: defect,
        condition_number: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        holdout_error: holdout,
    })
}

/// Random orthogonal m × m matrix (QR of a Gaussian matrix with the sign
/// of R's diagonal folded in).
pub fn random_rotation(m: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let a = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
