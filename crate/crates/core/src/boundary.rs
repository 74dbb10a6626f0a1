//! Boundary values of A from near-boundary decay of interior sources.
//!
//! Ψ maps an interior source F to the flux ν·A∇u of −∇·A∇u = F, u|∂Ω = 0.
//! For constant A on the half-space {y_n > 0} and F = e^{iξ′·x′}δ(y_n − d),
//! the boundary flux is −e^{−iλ₋d}e^{iξ′·x′}, where λ_± are the roots of
//! a_nn λ² + 2(a_n′·ξ′)λ + ξ′·A″ξ′ = 0. So the depth profile decays at Im λ₊
//! and its phase turns at −Re λ₊. The amplitude carries no factor of A:
//! Ψ is invariant under A ↦ cA and a_nn must come from a calibration.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde_json::{json, Value};

use crate::config::HalfspaceSpec;
use crate::elliptic::assemble_p;
use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::mesh::{build_periodic_slab, BoundaryTrace, Mesh, ScalarField, TensorField};

/// Relative residual of the depth fit above which a probe is flagged.
pub const DECAY_FIT_TOL: f64 = 5e-2;
/// Relative residual of the tensor fit above which the probes are rejected.
pub const TENSOR_FIT_TOL: f64 = 0.1;
/// Deepest admissible source, as a fraction of the slab thickness.
pub const DEPTH_FRACTION: f64 = 0.2;

/// Ψ(F) for a nodal source F: the variational flux of the zero-Dirichlet
/// solution of −∇·A∇u = F.
pub fn psi_map(mesh: Arc<Mesh>, tensor: &TensorField, f: &ScalarField) -> Result<BoundaryTrace> {
    f.check_mesh(&mesh)?;
    let one = ScalarField::constant(&mesh, 1.0);
    let p = assemble_p(mesh, &one, tensor)?;
    psi_with(&p, f)
}

fn psi_with(p: &crate::elliptic::OperatorP, f: &ScalarField) -> Result<BoundaryTrace> {
    let load = p.power_load(f);
    let u = p.solve_load(&p.gather(&load))?;
    Ok(p.flux(&u, None, Some(&load)))
}

fn check_tensor(a: &[Vec<f64>]) -> Result<usize> {
    let n = a.len();
    if n < 2 || a.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("tensor must be a square matrix of size ≥ 2"));
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[i][j] + a[j][i]));
    if (0..n).any(|i| (0..n).any(|j| (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()))) {
        return Err(Error::invalid("tensor must be symmetric"));
    }
    if m.cholesky().is_none() {
        return Err(Error::invalid("tensor is not positive definite"));
    }
    Ok(n)
}

/// Root λ₊ (Im λ₊ > 0) of a_nn λ² + 2(Σ_α a_nα ξ_α)λ + Σ_αβ a_αβ ξ_α ξ_β = 0.
/// The last coordinate is the inward normal.
pub fn halfspace_root(a: &[Vec<f64>], xi: &[f64]) -> Result<Complex64> {
    let n = check_tensor(a)?;
    if xi.len() != n - 1 {
        return Err(Error::invalid(format!("tangential frequency needs {} components", n - 1)));
    }
    if xi.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("tangential frequency must be nonzero"));
    }
    let nn = n - 1;
    let ann = a[nn][nn];
    let b: f64 = (0..nn).map(|al| a[nn][al] * xi[al]).sum();
    let c: f64 = (0..nn).flat_map(|al| (0..nn).map(move |be| (al, be))).map(|(al, be)| a[al][be] * xi[al] * xi[be]).sum();
    let disc = ann * c - b * b;
    Ok(Complex64::new(-b / ann, disc.max(0.0).sqrt() / ann))
}

/// |ξ′|_A = Im λ₊: the decay rate of the leading boundary kernel.
pub fn anisotropic_norm(a: &[Vec<f64>], xi: &[f64]) -> Result<f64> {
    Ok(halfspace_root(a, xi)?.im)
}

/// Depth profile of one tangential frequency.
#[derive(Clone, Debug)]
pub struct HalfspaceProbe {
    /// Tangential position of the probed face (the slab is periodic).
    pub x0: f64,
    pub xi: Vec<f64>,
    pub depths: Vec<f64>,
    /// Complex flux amplitude at frequency ξ′ for each depth.
    pub amplitudes: Vec<Complex64>,
    /// Fitted −d ln|a|/dd.
    pub decay_rate: f64,
    /// Fitted −d arg a/dd, which estimates Re λ₊.
    pub oscillation_rate: f64,
    /// ‖a − fit‖ / ‖a‖.
    pub residual: f64,
    pub warning: Option<String>,
}

impl HalfspaceProbe {
    /// Measured root λ̂₊ = oscillation + i·decay.
    pub fn root(&self) -> Complex64 {
        Complex64::new(self.oscillation_rate, self.decay_rate)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "x0": self.x0,
            "xi": self.xi,
            "depths": self.depths,
            "decay_rate": self.decay_rate,
            "oscillation_rate": self.oscillation_rate,
            "residual": self.residual,
            "warning": self.warning,
        })
    }
}

/// Fits a(d) = C e^{s d} with complex s by linear least squares on ln|a|
/// and the unwrapped phase.
fn fit_profile(depths: &[f64], amps: &[Complex64]) -> Result<(Complex64, Complex64, f64)> {
    if amps.iter().any(|a| a.norm() == 0.0 || !a.norm().is_finite()) {
        return Err(Error::identification("halfspace", "vanishing flux amplitude; frequency not resolved on the face"));
    }
    let mut phase = Vec::with_capacity(amps.len());
    let mut prev = 0.0f64;
    for (k, a) in amps.iter().enumerate() {
        let mut ph = a.arg();
        if k > 0 {
            while ph - prev > std::f64::consts::PI {
                ph -= 2.0 * std::f64::consts::PI;
            }
            while ph - prev < -std::f64::consts::PI {
                ph += 2.0 * std::f64::consts::PI;
            }
        }
        prev = ph;
        phase.push(ph);
    }
    let n = depths.len() as f64;
    let md = depths.iter().sum::<f64>() / n;
    let line = |y: &[f64]| {
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = depths.iter().zip(y).map(|(d, v)| (d - md) * (v - my)).sum();
        let sxx: f64 = depths.iter().map(|d| (d - md).powi(2)).sum();
        let slope = sxy / sxx;
        (my - slope * md, slope)
    };
    let logs: Vec<f64> = amps.iter().map(|a| a.norm().ln()).collect();
    let (c_re, s_re) = line(&logs);
    let (c_im, s_im) = line(&phase);
    let c = Complex64::new(c_re, c_im).exp();
    let s = Complex64::new(s_re, s_im);
    let err: f64 = depths.iter().zip(amps).map(|(d, a)| (a - c * (s * d).exp()).norm_sqr()).sum::<f64>().sqrt();
    let total: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    Ok((c, s, err / total))
}

/// e^{iξx} amplitude of a real flux sampled on the face y = 0 of a periodic
/// slab: A = (2/N) Σ g(x_j) e^{−iξx_j}.
fn face_amplitude(mesh: &Mesh, trace: &BoundaryTrace, xi: f64) -> Complex64 {
    let mut sum = Complex64::new(0.0, 0.0);
    let mut count = 0usize;
    for (k, &b) in mesh.boundary_nodes.iter().enumerate() {
        let p = mesh.point(b);
        if p[1].abs() < 1e-12 {
            sum += trace.values[k] * Complex64::new(0.0, -xi * p[0]).exp();
            count += 1;
        }
    }
    sum * (2.0 / count as f64)
}

/// Source Re(e^{iξx})·b(y − d) with b the unit-mass hat of half-width one
/// cell (two cells of support).
fn layer_source(mesh: &Mesh, xi: f64, depth: f64, h: f64) -> ScalarField {
    ScalarField::from_fn(mesh, |p| {
        let s = (p[1] - depth).abs();
        let hat = if s < h { (1.0 - s / h) / h } else { 0.0 };
        (xi * p[0]).cos() * hat
    })
}

/// Probes Ψ on the face y = 0 of a periodic slab with constant `tensor`:
/// one thin modulated source per (ξ′, depth), the face amplitude at ξ′, and
/// a linear fit of ln a(d).
pub fn probe_boundary_decay(mesh: Arc<Mesh>, tensor: &[Vec<f64>], frequencies: &[f64], depths: &[f64]) -> Result<Vec<HalfspaceProbe>> {
    let (period, thickness) = match mesh.shape {
        crate::mesh::Shape::PeriodicSlab { lengths } if mesh.dim == 2 => (lengths[0], lengths[1]),
        _ => return Err(Error::invalid("decay probing needs a two-dimensional periodic slab")),
    };
    check_tensor(tensor)?;
    if tensor.len() != 2 {
        return Err(Error::invalid("slab probing needs a 2 × 2 tensor"));
    }
    if depths.len() < 2 || depths.windows(2).any(|w| w[1] <= w[0]) || depths[0] <= 0.0 {
        return Err(Error::invalid("depths must be positive and strictly increasing (at least two)"));
    }
    if *depths.last().unwrap() > DEPTH_FRACTION * thickness + 1e-12 {
        return Err(Error::invalid(format!("depths must stay within {} of the slab thickness", DEPTH_FRACTION)));
    }
    for &xi in frequencies {
        let k = xi * period / (2.0 * std::f64::consts::PI);
        if !(xi > 0.0) || (k - k.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!("frequency {xi} is not a positive multiple of 2π/{period}")));
        }
    }
    let a = TensorField::constant(&mesh, tensor)?;
    let one = ScalarField::constant(&mesh, 1.0);
    let p = assemble_p(mesh.clone(), &one, &a)?;
    let h = mesh
        .nodes
        .iter()
        .map(|q| q[1])
        .filter(|&y| y > 1e-12)
        .fold(f64::INFINITY, f64::min);
    let mut out = Vec::with_capacity(frequencies.len());
    for &xi in frequencies {
        let mut amps = Vec::with_capacity(depths.len());
        for &d in depths {
            let flux = psi_with(&p, &layer_source(&mesh, xi, d, h))?;
            amps.push(face_amplitude(&mesh, &flux, xi));
        }
        let (_, s, residual) = fit_profile(depths, &amps)?;
        let decay_rate = -s.re;
        if !(decay_rate > 0.0) {
            return Err(Error::identification("halfspace", format!("non-decaying profile at ξ′ = {xi}: rate {decay_rate}")));
        }
        let warning = (residual > DECAY_FIT_TOL)
            .then(|| format!("depth fit residual {residual:.3e} exceeds {DECAY_FIT_TOL}: leading term not dominant"));
        let reflected = (-2.0 * decay_rate * (thickness - depths.last().unwrap())).exp();
        let warning = warning.or_else(|| (reflected > 1e-3).then(|| format!("opposite face contributes up to {reflected:.1e}")));
        out.push(HalfspaceProbe {
            x0: 0.0,
            xi: vec![xi],
            depths: depths.to_vec(),
            amplitudes: amps,
            decay_rate,
            oscillation_rate: -s.im,
            residual,
            warning,
        });
    }
    Ok(out)
}

/// Probe table: ξ′ components, depth, Re and Im of the amplitude.
pub fn probes_csv(probes: &[HalfspaceProbe]) -> String {
    let n = probes.first().map_or(1, |p| p.xi.len());
    let mut s = (0..n).map(|i| format!("xi{i}")).collect::<Vec<_>>().join(",");
    s.push_str(",depth,re,im\n");
    for p in probes {
        for (d, a) in p.depths.iter().zip(&p.amplitudes) {
            let xi: Vec<String> = p.xi.iter().map(|&x| fmt17(x)).collect();
            s.push_str(&format!("{},{},{},{}\n", xi.join(","), fmt17(*d), fmt17(a.re), fmt17(a.im)));
        }
    }
    s
}

/// Â at one boundary point.
#[derive(Clone, Debug)]
pub struct BoundaryTensorEstimate {
    pub x0: f64,
    pub a_hat: Vec<Vec<f64>>,
    /// ‖M θ − r‖ / ‖r‖ of the root relation.
    pub residual: f64,
    pub frequencies: Vec<Vec<f64>>,
    pub positive_definite: bool,
}

impl BoundaryTensorEstimate {
    pub fn to_json(&self) -> Value {
        json!({
            "x0": self.x0,
            "A_hat": self.a_hat,
            "residual": self.residual,
            "frequencies": self.frequencies,
            "positive_definite": self.positive_definite,
        })
    }
}

/// Linear least squares for (a_nα, A″) from a_nn λ̂² + 2(a_n′·ξ′)λ̂ + ξ′·A″ξ′ = 0,
/// real and imaginary parts, with a_nn supplied by calibration.
pub fn estimate_boundary_tensor(probes: &[HalfspaceProbe], a_nn: f64) -> Result<BoundaryTensorEstimate> {
    if !(a_nn > 0.0) {
        return Err(Error::invalid("calibrated a_nn must be positive"));
    }
    let first = probes.first().ok_or_else(|| Error::invalid("no probes"))?;
    let t = first.xi.len();
    if probes.iter().any(|p| p.xi.len() != t) {
        return Err(Error::invalid("probes disagree on the tangential dimension"));
    }
    let sym: Vec<(usize, usize)> = (0..t).flat_map(|i| (i..t).map(move |j| (i, j))).collect();
    let unknowns = t + sym.len();
    let rows = 2 * probes.len();
    let mut m = DMatrix::zeros(rows, unknowns);
    let mut r = DVector::zeros(rows);
    for (k, p) in probes.iter().enumerate() {
        let lam = p.root();
        let rhs = -a_nn * lam * lam;
        for al in 0..t {
            let c = 2.0 * p.xi[al] * lam;
            m[(2 * k, al)] = c.re;
            m[(2 * k + 1, al)] = c.im;
        }
        for (s, &(i, j)) in sym.iter().enumerate() {
            let c = if i == j { p.xi[i] * p.xi[i] } else { 2.0 * p.xi[i] * p.xi[j] };
            m[(2 * k, t + s)] = c;
        }
        r[2 * k] = rhs.re;
        r[2 * k + 1] = rhs.im;
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    if rank < unknowns {
        return Err(Error::identification(
            "halfspace",
            format!("probes determine {rank} of {unknowns} tensor entries; add frequencies or directions"),
        ));
    }
    let theta = svd.solve(&r, 1e-12 * smax).map_err(|e| Error::solver(e.to_string()))?;
    let residual = (&m * &theta - &r).norm() / r.norm().max(f64::MIN_POSITIVE);
    let n = t + 1;
    let mut a = vec![vec![0.0; n]; n];
    a[t][t] = a_nn;
    for al in 0..t {
        a[t][al] = theta[al];
        a[al][t] = theta[al];
    }
    for (s, &(i, j)) in sym.iter().enumerate() {
        a[i][j] = theta[t + s];
        a[j][i] = theta[t + s];
    }
    if residual > TENSOR_FIT_TOL {
        return Err(Error::identification(
            "halfspace",
            format!("probes are inconsistent with one constant tensor: residual {residual:.3e}"),
        ));
    }
    let positive_definite = DMatrix::from_fn(n, n, |i, j| a[i][j]).cholesky().is_some();
    Ok(BoundaryTensorEstimate {
        x0: first.x0,
        a_hat: a,
        residual,
        frequencies: probes.iter().map(|p| p.xi.clone()).collect(),
        positive_definite,
    })
}

/// Slab experiment from a `[halfspace]` table: probes, fitted rates against
/// the exact roots, and the tensor estimate.
pub struct HalfspaceRun {
    pub probes: Vec<HalfspaceProbe>,
    pub exact_roots: Vec<Complex64>,
    pub estimate: BoundaryTensorEstimate,
}

impl HalfspaceRun {
    pub fn to_json(&self) -> Value {
        json!({
            "probes": self.probes.iter().map(|p| p.to_json()).collect::<Vec<_>>(),
            "exact_roots": self.exact_roots.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
            "estimate": self.estimate.to_json(),
        })
    }
}

pub fn run_halfspace(spec: &HalfspaceSpec) -> Result<HalfspaceRun> {
    let mesh = Arc::new(build_periodic_slab([1.0, spec.thickness], spec.divisions)?);
    let probes = probe_boundary_decay(mesh, &spec.tensor, &spec.frequencies, &spec.depths)?;
    let exact_roots = spec
        .frequencies
        .iter()
        .map(|&xi| halfspace_root(&spec.tensor, &[xi]))
        .collect::<Result<_>>()?;
    let estimate = estimate_boundary_tensor(&probes, spec.a_nn)?;
    Ok(HalfspaceRun {
        probes,
        exact_roots,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{boundary_integral, build_box_mesh};
    use std::f64::consts::PI;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn roots_of_reference_tensors() {
        let i = Complex64::new(0.0, 1.0);
        assert!(close(halfspace_root(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0]).unwrap(), i, 1e-15));
        assert!(close(halfspace_root(&[vec![4.0, 0.0], vec![0.0, 1.0]], &[1.0]).unwrap(), 2.0 * i, 1e-15));
        assert!(close(halfspace_root(&[vec![2.0, 1.0], vec![1.0, 1.0]], &[1.0]).unwrap(), Complex64::new(-1.0, 1.0), 1e-15));
        assert!(halfspace_root(&[vec![1.0, 2.0], vec![2.0, 1.0]], &[1.0]).is_err());
        assert!(halfspace_root(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0]).is_err());
    }

    #[test]
    fn roots_in_three_dimensions() {
        let a = vec![vec![2.0, 0.0, 0.5], vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 1.0]];
        let z = halfspace_root(&a, &[1.0, 1.0]).unwrap();
        let poly = z * z + 2.0 * 0.5 * z + 3.0;
        assert!(poly.norm() < 1e-12 && z.im > 0.0);
    }

    #[test]
    fn psi_of_zero_and_of_one() {
        let mesh = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[16, 16]).unwrap());
        let a = TensorField::identity(&mesh);
        let zero = psi_map(mesh.clone(), &a, &ScalarField::constant(&mesh, 0.0)).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let g = psi_map(mesh.clone(), &a, &ScalarField::constant(&mesh, 1.0)).unwrap();
        assert!((boundary_integral(&mesh, &g) + 1.0).abs() < 1e-8);
        let d = TensorField::constant(&mesh, &[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g4 = psi_map(mesh.clone(), &d, &ScalarField::constant(&mesh, 1.0)).unwrap();
        assert!((boundary_integral(&mesh, &g4) + 1.0).abs() < 1e-8);
        assert!(g.values.iter().zip(&g4.values).any(|(a, b)| (a - b).abs() > 1e-3));
    }

    #[test]
    fn psi_is_scale_invariant() {
        let mesh = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[8, 8]).unwrap());
        let f = ScalarField::from_fn(&mesh, |p| p[0] * p[1]);
        let a = TensorField::constant(&mesh, &[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = TensorField::constant(&mesh, &[vec![6.0, 3.0], vec![3.0, 3.0]]).unwrap();
        let ga = psi_map(mesh.clone(), &a, &f).unwrap();
        let gb = psi_map(mesh, &b, &f).unwrap();
        for (x, y) in ga.values.iter().zip(&gb.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn synthetic(a: &[Vec<f64>], xis: &[f64]) -> Vec<HalfspaceProbe> {
        xis.iter()
            .map(|&xi| {
                let z = halfspace_root(a, &[xi]).unwrap();
                HalfspaceProbe {
                    x0: 0.0,
                    xi: vec![xi],
                    depths: vec![],
                    amplitudes: vec![],
                    decay_rate: z.im,
                    oscillation_rate: z.re,
                    residual: 0.0,
                    warning: None,
                }
            })
            .collect()
    }

    #[test]
    fn algebraic_inversion_is_exact() {
        for a in [vec![vec![2.0, 1.0], vec![1.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]] {
            let est = estimate_boundary_tensor(&synthetic(&a, &[1.0, 2.0, 3.0]), a[1][1]).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert!((est.a_hat[i][j] - a[i][j]).abs() < 1e-8);
                }
            }
            assert!(est.positive_definite);
        }
    }

    #[test]
    fn inconsistent_or_missing_probes_are_rejected() {
        assert!(estimate_boundary_tensor(&[], 1.0).is_err());
        let mut probes = synthetic(&[vec![2.0, 1.0], vec![1.0, 1.0]], &[1.0, 2.0]);
        probes[1].decay_rate *= 5.0;
        probes[1].oscillation_rate = 3.0;
        assert!(estimate_boundary_tensor(&probes, 1.0).is_err());
    }

    #[test]
    fn slab_decay_matches_root_for_identity() {
        let mesh = Arc::new(build_periodic_slab([1.0, 1.0], [64, 64]).unwrap());
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let depths = [0.0625, 0.09375, 0.125, 0.15625];
        let probes = probe_boundary_decay(mesh, &a, &[2.0 * PI], &depths).unwrap();
        let rate = probes[0].decay_rate;
        assert!((rate / (2.0 * PI) - 1.0).abs() < 0.05, "{rate}");
        assert!(probes[0].oscillation_rate.abs() < 0.05 * rate);
    }
}
