//! Dirichlet-series fitting Σ_k e^{−λ_k t} d_k g_k of multichannel flux
//! traces.
//!
//! All boundary nodes of all probe traces are treated as channels of one
//! exponential sum. The channels are compressed to their dominant singular
//! subspace, the exponents come from the shift invariance of a block Hankel
//! matrix (a multichannel matrix pencil), and the cluster amplitudes from a
//! linear least-squares solve; the exponents are then refined by variable
//! projection on the compressed data.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::elliptic::cluster_sorted;
use crate::error::{Error, Result};
use crate::heat::FluxTrace;
use crate::linalg;
use crate::mesh::BoundaryTrace;

/// Relative singular value threshold for the model order.
pub const ORDER_RTOL: f64 = 1e-12;
/// Relative cluster tolerance at fit level.
pub const FIT_CLUSTER_RTOL: f64 = 1e-3;
/// Relative singular value threshold for the rank of a cluster's amplitude
/// matrix.
pub const AMPLITUDE_RTOL: f64 = 1e-2;
/// Modes with e^{−λ t_min} below this are unobservable.
pub const OBSERVABILITY_FLOOR: f64 = 1e-12;

/// One recovered exponent cluster.
#[derive(Clone, Debug)]
pub struct SeriesCluster {
    pub exponent: f64,
    /// Rank of the amplitude matrix across probes: all probes sharing one
    /// exponent add up to a single term of the channel-stacked sum, so the
    /// multiplicity is only visible across probes.
    pub multiplicity: usize,
    /// Raw pencil exponents in the cluster.
    pub raw_exponents: Vec<f64>,
    /// Weighted-orthonormal boundary traces Ĝ spanning the cluster's flux
    /// subspace, `multiplicity` of them.
    pub traces: Vec<BoundaryTrace>,
    /// d̂[j][p]: coefficient of trace j in probe p.
    pub coefficients: Vec<Vec<f64>>,
    /// Singular values of the weighted amplitude matrix.
    pub amplitude_singular_values: Vec<f64>,
    pub observable: bool,
}

impl SeriesCluster {
    /// Amplitude vector Σ_j d̂[j][p] Ĝ_j of probe p.
    pub fn amplitude(&self, p: usize) -> Vec<f64> {
        let nb = self.traces.first().map_or(0, |t| t.values.len());
        let mut out = vec![0.0; nb];
        for (g, d) in self.traces.iter().zip(&self.coefficients) {
            linalg::axpy(d[p], &g.values, &mut out);
        }
        out
    }
}

/// Result of `fit_dirichlet_series`.
#[derive(Clone, Debug)]
pub struct DirichletSeriesFit {
    pub clusters: Vec<SeriesCluster>,
    /// ‖model − data‖_F / ‖data‖_F over the fit window.
    pub residual: f64,
    /// Singular values of the block Hankel matrix (conditioning report).
    pub singular_values: Vec<f64>,
    pub window: [f64; 2],
    pub model_order: usize,
    pub refined: bool,
}

impl DirichletSeriesFit {
    pub fn exponents(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.exponent).collect()
    }

    pub fn multiplicities(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.multiplicity).collect()
    }

    pub fn observable(&self) -> Vec<&SeriesCluster> {
        self.clusters.iter().filter(|c| c.observable).collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "exponents": self.exponents(),
            "multiplicities": self.multiplicities(),
            "observable": self.clusters.iter().map(|c| c.observable).collect::<Vec<_>>(),
            "residual": self.residual,
            "window": self.window,
            "model_order": self.model_order,
            "refined": self.refined,
            "singular_values": self.singular_values,
        })
    }
}

/// Weighted channel matrix (channels × samples) restricted to the window.
struct Data {
    y: DMatrix<f64>,
    t: Vec<f64>,
    dt: f64,
    nb: usize,
    probes: usize,
    sqrt_w: Vec<f64>,
}

fn window_data(traces: &[FluxTrace], window: [f64; 2]) -> Result<Data> {
    let first = traces.first().ok_or_else(|| Error::invalid("no traces to fit"))?;
    for tr in traces {
        if tr.times != first.times || tr.nodes != first.nodes {
            return Err(Error::invalid("traces must share the time grid and boundary nodes"));
        }
    }
    let idx: Vec<usize> = (0..first.times.len())
        .filter(|&i| first.times[i] >= window[0] - 1e-12 && first.times[i] <= window[1] + 1e-12)
        .collect();
    if idx.len() < 8 {
        return Err(Error::invalid(format!("only {} samples in the fit window", idx.len())));
    }
    let t: Vec<f64> = idx.iter().map(|&i| first.times[i]).collect();
    let dt = t[1] - t[0];
    if !(dt > 0.0) || t.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0)) {
        return Err(Error::invalid("fit window must be uniformly sampled"));
    }
    let nb = first.nodes.len();
    let sqrt_w: Vec<f64> = first.weights.iter().map(|w| w.sqrt()).collect();
    let mut y = DMatrix::zeros(traces.len() * nb, t.len());
    for (p, tr) in traces.iter().enumerate() {
        for (n, &i) in idx.iter().enumerate() {
            for b in 0..nb {
                y[(p * nb + b, n)] = sqrt_w[b] * tr.values[i][b];
            }
        }
    }
    Ok(Data {
        y,
        t,
        dt,
        nb,
        probes: traces.len(),
        sqrt_w,
    })
}

/// Compressed channels: rows are orthogonal channel combinations, columns
/// time samples; the singular values of the data are returned alongside.
fn compress(y: &DMatrix<f64>, budget: usize) -> (DMatrix<f64>, Vec<f64>) {
    let r_mat = if y.nrows() > y.ncols() { y.clone().qr().r() } else { y.clone() };
    let svd = r_mat.svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let keep = order.len().min(3 * budget.max(1));
    let mut z = DMatrix::zeros(keep, y.ncols());
    for (r, &i) in order.iter().take(keep).enumerate() {
        z.row_mut(r).copy_from(&(vt.row(i) * svd.singular_values[i]));
    }
    (z, sv)
}

/// Pencil exponents from the compressed data.
fn pencil_exponents(z: &DMatrix<f64>, dt: f64, budget: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (r, n) = z.shape();
    // delay embedding depth: enough rows to exceed the budget
    let l = ((2 * budget).div_ceil(r.max(1))).clamp(2, n / 3);
    let cols = n - l + 1;
    let mut h = DMatrix::zeros(r * l, cols);
    for j in 0..cols {
        for d in 0..l {
            for c in 0..r {
                h[(d * r + c, j)] = z[(c, j + d)];
            }
        }
    }
    let svd = h.svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let top = sv.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::identification("series", "trace vanishes on the fit window"));
    }
    let k = sv.iter().take_while(|&&s| s > ORDER_RTOL * top).count().min(budget).min(cols - 1);
    if k == 0 {
        return Err(Error::identification("series", format!("pencil rank collapse, singular values {sv:?}")));
    }
    // time-domain signal subspace (cols × k)
    let mut v = DMatrix::zeros(cols, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        for t in 0..cols {
            v[(t, c)] = vt[(i, t)];
        }
    }
    let up = v.rows(0, cols - 1).into_owned();
    let dn = v.rows(1, cols - 1).into_owned();
    let psi = linalg::lstsq(&up, &dn, 1e-14);
    let eig = psi.complex_eigenvalues();
    let mut lambdas: Vec<f64> = eig
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * z.norm() && z.re > 0.0 && z.re < 1.0)
        .map(|z| -z.re.ln() / dt)
        .collect();
    lambdas.sort_by(|a, b| a.total_cmp(b));
    if lambdas.is_empty() {
        return Err(Error::identification("series", format!("no decaying exponents found, singular values {sv:?}")));
    }
    Ok((lambdas, sv))
}

fn vandermonde(t: &[f64], t0: f64, lambdas: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(t.len(), lambdas.len(), |i, j| (-lambdas[j] * (t[i] - t0)).exp())
}

/// ‖(I − E E⁺) D‖_F for data D (samples × channels).
fn projected_residual(e: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let x = linalg::lstsq(e, d, 1e-15);
    d - e * x
}

/// Gauss–Newton on the cluster exponents with the amplitudes eliminated.
fn refine(t: &[f64], t0: f64, lambdas: &[f64], d: &DMatrix<f64>) -> Option<Vec<f64>> {
    let k = lambdas.len();
    let res = |l: &[f64]| projected_residual(&vandermonde(t, t0, l), d);
    let mut cur = lambdas.to_vec();
    let mut r0 = res(&cur);
    let start = r0.norm();
    for _ in 0..8 {
        let n = r0.len();
        let mut jac = DMatrix::zeros(n, k);
        for j in 0..k {
            let h = 1e-7 * cur[j].max(1.0);
            let mut lp = cur.clone();
            lp[j] += h;
            let rp = res(&lp);
            let col = (rp - &r0) / h;
            jac.column_mut(j).copy_from(&DVector::from_column_slice(col.as_slice()));
        }
        let rv = DMatrix::from_column_slice(n, 1, r0.as_slice());
        let step = linalg::lstsq(&jac, &(-rv), 1e-12);
        let cand: Vec<f64> = cur.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
        if cand.iter().any(|&v| !(v > 0.0)) || cand.windows(2).any(|w| w[1] <= w[0]) {
            break;
        }
        let rc = res(&cand);
        if rc.norm() >= r0.norm() {
            break;
        }
        let done = step.norm() <= 1e-13 * cur.iter().map(|v| v * v).sum::<f64>().sqrt();
        cur = cand;
        r0 = rc;
        if done {
            break;
        }
    }
    (r0.norm() < start).then_some(cur)
}

fn fit_once(data: &Data, mode_budget: usize, window: [f64; 2]) -> Result<DirichletSeriesFit> {
    let (z, _) = compress(&data.y, mode_budget);
    let (raw, sv) = pencil_exponents(&z, data.dt, mode_budget)?;
    let model_order = raw.len();
    let groups = cluster_sorted(&raw, FIT_CLUSTER_RTOL);
    let mut lambdas: Vec<f64> = groups.iter().map(|g| raw[g.clone()].iter().sum::<f64>() / g.len() as f64).collect();
    let t0 = data.t[0];
    let zt = z.transpose();
    let mut refined = false;
    if let Some(better) = refine(&data.t, t0, &lambdas, &zt) {
        lambdas = better;
        refined = true;
    }
    let e = vandermonde(&data.t, t0, &lambdas);
    let yt = data.y.transpose();
    let x = linalg::lstsq(&e, &yt, 1e-15);
    let resid = (&yt - &e * &x).norm() / yt.norm();
    let mut clusters = Vec::with_capacity(lambdas.len());
    let total_scale = x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for (c, g) in groups.iter().enumerate() {
        let lam = lambdas[c];
        // amplitude at t = 0 from the amplitude at t0
        let growth = (lam * t0).exp();
        let mut a = DMatrix::zeros(data.nb, data.probes);
        for p in 0..data.probes {
            for b in 0..data.nb {
                a[(b, p)] = x[(c, p * data.nb + b)] * growth;
            }
        }
        let svd = a.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let top = s.first().copied().unwrap_or(0.0);
        let m = s.iter().filter(|&&v| v > AMPLITUDE_RTOL * top && top > 0.0).count().max(1);
        let mut traces = Vec::with_capacity(m);
        let mut coefficients = Vec::with_capacity(m);
        for &i in order.iter().take(m) {
            let mut d: Vec<f64> = (0..data.probes).map(|p| svd.singular_values[i] * vt[(i, p)]).collect();
            let mut sum: f64 = d.iter().sum();
            if sum.abs() <= 1e-12 * d.iter().map(|v| v.abs()).sum::<f64>() {
                sum = d.iter().cloned().fold(0.0, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            }
            let sign = if sum < 0.0 { -1.0 } else { 1.0 };
            d.iter_mut().for_each(|v| *v *= sign);
            let g: Vec<f64> = (0..data.nb).map(|b| sign * u[(b, i)] / data.sqrt_w[b]).collect();
            traces.push(BoundaryTrace::new(g));
            coefficients.push(d);
        }
        let weight = x.row(c).iter().fold(0.0f64, |a, b| a.max(b.abs()));
        clusters.push(SeriesCluster {
            exponent: lam,
            multiplicity: m,
            raw_exponents: raw[g.clone()].to_vec(),
            traces,
            coefficients,
            amplitude_singular_values: s,
            observable: (-lam * window[0]).exp() > OBSERVABILITY_FLOOR && weight > 1e-10 * total_scale,
        });
    }
    Ok(DirichletSeriesFit {
        clusters,
        residual: resid,
        singular_values: sv,
        window,
        model_order,
        refined,
    })
}

/// Fits Σ_k e^{−λ_k t} d_k^{(p)} Ĝ_k to the traces of several probes on
/// the window [t_min, t_max]. The window start is raised to 0.3/λ̂₁ when that
/// is later.
pub fn fit_dirichlet_series(traces: &[FluxTrace], mode_budget: usize, window: [f64; 2]) -> Result<DirichletSeriesFit> {
    if !(window[0] > 0.0) || !(window[1] > window[0]) {
        return Err(Error::invalid("fit window must satisfy 0 < t_min < t_max"));
    }
    if mode_budget == 0 {
        return Err(Error::invalid("mode budget must be positive"));
    }
    let data = window_data(traces, window)?;
    let fit = fit_once(&data, mode_budget, window)?;
    let lam1 = fit.clusters[0].exponent;
    let t_min = 0.3 / lam1;
    if t_min > window[0] + data.dt && t_min < window[1] {
        let w = [t_min, window[1]];
        return fit_once(&window_data(traces, w)?, mode_budget, w);
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(terms: &[(f64, f64, Vec<f64>)], dt: f64, n: usize) -> FluxTrace {
        let nb = terms[0].2.len();
        let times: Vec<f64> = (1..=n).map(|i| i as f64 * dt).collect();
        let values = times
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; nb];
                for (lam, d, g) in terms {
                    linalg::axpy(d * (-lam * t).exp(), g, &mut row);
                }
                row
            })
            .collect();
        FluxTrace {
            times,
            values,
            nodes: (0..nb).collect(),
            weights: vec![1.0; nb],
            source: "synthetic".into(),
        }
    }

    #[test]
    fn two_exponentials() {
        let g1 = vec![0.6, 0.8, 0.0];
        let g2 = vec![0.0, 0.6, -0.8];
        let tr = synthetic(&[(3.0, 2.0, g1.clone()), (10.0, 1.0, g2.clone())], 0.01, 100);
        let fit = fit_dirichlet_series(&[tr], 10, [0.05, 1.0]).unwrap();
        assert_eq!(fit.clusters.len(), 2);
        assert!((fit.clusters[0].exponent - 3.0).abs() < 1e-6);
        assert!((fit.clusters[1].exponent - 10.0).abs() < 1e-6);
        assert!((fit.clusters[0].coefficients[0][0] - 2.0).abs() < 1e-6);
        assert!((fit.clusters[1].coefficients[0][0] - 1.0).abs() < 1e-6);
        for (b, g) in g1.iter().enumerate() {
            assert!((fit.clusters[0].traces[0].values[b] - g).abs() < 1e-6);
        }
        assert!(fit.residual < 1e-8);
    }

    #[test]
    fn repeated_exponent_across_probes() {
        let g1 = vec![1.0, 0.0, 0.0, 0.0];
        let g2 = vec![0.0, 1.0, 0.0, 0.0];
        let g3 = vec![0.0, 0.0, 1.0, 1.0];
        let a = synthetic(&[(2.0, 1.0, g1.clone()), (5.0, 1.0, g2.clone()), (8.0, 1.0, g3.clone())], 0.01, 100);
        let b = synthetic(&[(2.0, -0.5, g1), (5.0, 2.0, g2), (5.0, 1.0, g3)], 0.01, 100);
        let fit = fit_dirichlet_series(&[a, b], 10, [0.05, 1.0]).unwrap();
        assert_eq!(fit.exponents().len(), 3, "{:?}", fit.exponents());
        assert_eq!(fit.multiplicities(), vec![1, 2, 1]);
    }

    #[test]
    fn window_must_be_valid() {
        let tr = synthetic(&[(3.0, 1.0, vec![1.0])], 0.01, 100);
        assert!(fit_dirichlet_series(&[tr.clone()], 4, [0.0, 1.0]).is_err());
        assert!(fit_dirichlet_series(&[tr], 4, [0.9, 0.95]).is_err());
    }
}
