//! Complex geometrical optics solutions w = e^{iρ·x} γ^{-1/2} (1 + r) of the
//! conductivity equation and the density checks built on their products.
//!
//! The remainder solves (Δ + 2iρ·∇) r = q (1 + r), q = Δ√γ / √γ, on a
//! periodic box. The box is rotated so that its first axis is parallel to
//! Im ρ and the Fourier lattice is shifted by half a step along that axis,
//! which keeps the symbol −|k|² − 2ρ·k of the operator away from zero: its
//! imaginary part is −2|Im ρ| k₁ with k₁ never zero.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde_json::{json, Value};

use crate::elliptic::Conductivity;
use crate::error::{Error, Result};
use crate::fem;
use crate::mesh::{BoundaryTrace, Mesh, ScalarField};

/// Tolerance for the phase invariants ρ·ρ = 0 and ρ₁ + ρ₂ = ξ.
pub const PHASE_TOL: f64 = 1e-12;
/// Fixed-point (or Krylov) stopping tolerance for the remainder.
pub const REMAINDER_TOL: f64 = 1e-10;
/// Maximum number of fixed-point sweeps.
pub const MAX_FIXED_POINT: usize = 200;

fn cdot(a: &[C64; 3], b: &[C64; 3]) -> C64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn rdot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn rnorm(a: &[f64; 3]) -> f64 {
    rdot(a, a).sqrt()
}

fn cnorm(a: &[C64; 3]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Two complex phases with ρⱼ·ρⱼ = 0 and ρ₁ + ρ₂ = ξ.
#[derive(Clone, Debug, PartialEq)]
pub struct CgoPhasePair {
    pub xi: [f64; 3],
    pub rho1: [C64; 3],
    pub rho2: [C64; 3],
    /// Tangential parameter t of the construction.
    pub t: f64,
    /// |ρ₁| = |ρ₂|.
    pub magnitude: f64,
    /// Orthonormal directions η₁, η₂ ⊥ ξ.
    pub eta: [[f64; 3]; 2],
}

impl CgoPhasePair {
    /// max(|ρ₁·ρ₁|, |ρ₂·ρ₂|, |ρ₁ + ρ₂ − ξ|).
    pub fn defect(&self) -> f64 {
        let sum: f64 = (0..3).map(|i| (self.rho1[i] + self.rho2[i] - self.xi[i]).norm_sqr()).sum::<f64>().sqrt();
        cdot(&self.rho1, &self.rho1).norm().max(cdot(&self.rho2, &self.rho2).norm()).max(sum)
    }
}

fn orthonormal_pair(xi: &[f64; 3]) -> [[f64; 3]; 2] {
    let n = rnorm(xi);
    let u = [xi[0] / n, xi[1] / n, xi[2] / n];
    // start from the coordinate axis least aligned with ξ, scanning from the
    // last axis so that ξ in the xy-plane gets η₁ in-plane and η₂ = e₃
    let mut best = 2;
    for i in (0..3).rev() {
        if u[i].abs() < u[best].abs() - 1e-12 {
            best = i;
        }
    }
    let mut e = [0.0; 3];
    e[best] = 1.0;
    let p = rdot(&e, &u);
    let mut a = [e[0] - p * u[0], e[1] - p * u[1], e[2] - p * u[2]];
    let na = rnorm(&a);
    a.iter_mut().for_each(|v| *v /= na);
    // η₁ = a × u keeps η₂ = a along the chosen axis when possible
    let b = [u[1] * a[2] - u[2] * a[1], u[2] * a[0] - u[0] * a[2], u[0] * a[1] - u[1] * a[0]];
    [b, a]
}

/// ρ₁ = ξ/2 + tη₁ + i s η₂, ρ₂ = ξ/2 − tη₁ − i s η₂, s² = |ξ|²/4 + t².
pub fn phase_pair_with_t(xi: [f64; 3], t: f64) -> Result<CgoPhasePair> {
    if rnorm(&xi) == 0.0 || xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("ξ must be a nonzero finite 3-vector"));
    }
    let eta = orthonormal_pair(&xi);
    let s = (rdot(&xi, &xi) / 4.0 + t * t).sqrt();
    let mut rho1 = [C64::new(0.0, 0.0); 3];
    let mut rho2 = [C64::new(0.0, 0.0); 3];
    for i in 0..3 {
        rho1[i] = C64::new(xi[i] / 2.0 + t * eta[0][i], s * eta[1][i]);
        rho2[i] = C64::new(xi[i] / 2.0 - t * eta[0][i], -s * eta[1][i]);
    }
    Ok(CgoPhasePair {
        xi,
        magnitude: cnorm(&rho1),
        rho1,
        rho2,
        t,
        eta,
    })
}

/// Phase pair with |ρⱼ| ≥ R. Only n = 3 is supported: the construction needs
/// two directions orthogonal to ξ.
pub fn make_phase_pair(xi: &[f64], r: f64) -> Result<CgoPhasePair> {
    if xi.len() != 3 {
        return Err(Error::invalid("phase pairs need n = 3"));
    }
    if !(r > 0.0) {
        return Err(Error::invalid("R must be positive"));
    }
    let x = [xi[0], xi[1], xi[2]];
    // |ρ|² = |ξ|²/2 + 2t²
    let t = ((r * r - rdot(&x, &x) / 2.0) / 2.0).max(0.0).sqrt();
    let mut pair = phase_pair_with_t(x, t)?;
    if pair.magnitude < r {
        // round-off: nudge t up
        pair = phase_pair_with_t(x, t * (1.0 + 1e-12) + 1e-12)?;
    }
    Ok(pair)
}

/// Perturbation schedule for t (relative), tried in order.
pub const T_PERTURBATIONS: [f64; 9] = [0.0, 0.0025, -0.0025, 0.005, -0.005, 0.0075, -0.0075, 0.01, -0.01];

/// Phase pair whose symbols stay at least `floor` away from zero on the
/// given wavevectors, searching the fixed perturbation schedule of t.
pub fn make_phase_pair_avoiding(xi: &[f64], r: f64, lattice: &[[f64; 3]], floor: f64) -> Result<CgoPhasePair> {
    let base = make_phase_pair(xi, r)?;
    for dt in T_PERTURBATIONS {
        let t = if base.t == 0.0 { dt } else { base.t * (1.0 + dt) };
        let pair = phase_pair_with_t(base.xi, t)?;
        let ok = [pair.rho1, pair.rho2].iter().all(|rho| lattice.iter().all(|k| symbol(rho, k).norm() >= floor));
        if ok && pair.magnitude >= r * (1.0 - 0.011) {
            return Ok(pair);
        }
    }
    Err(Error::solver("every perturbation of t leaves a lattice symbol collision"))
}

/// Symbol of Δ + 2iρ·∇ on e^{ik·x}: −|k|² − 2ρ·k.
pub fn symbol(rho: &[C64; 3], k: &[f64; 3]) -> C64 {
    -rdot(k, k) - 2.0 * (rho[0] * k[0] + rho[1] * k[1] + rho[2] * k[2])
}

/// Smooth cutoff: 1 for d ≤ 0, 0 for d ≥ w, C∞ in between.
fn cutoff(d: f64, w: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    if d >= w {
        return 0.0;
    }
    let f = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let s = d / w;
    f(1.0 - s) / (f(1.0 - s) + f(s))
}

/// γ extended from the box Ω = [lo, hi] to all of ℝ³:
/// γ_ext = c + (γ − c)·Πᵢ χ(distᵢ), equal to γ on Ω and to c outside a
/// collar of width `collar`.
#[derive(Clone)]
pub struct GammaExtension {
    pub gamma: Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync>,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub constant: f64,
    pub collar: f64,
}

impl GammaExtension {
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        let mut w = 1.0;
        for i in 0..3 {
            let d = (self.lo[i] - x[i]).max(x[i] - self.hi[i]).max(0.0);
            w *= cutoff(d, self.collar);
            if w == 0.0 {
                return self.constant;
            }
        }
        self.constant + (self.gamma.as_ref()(x) - self.constant) * w
    }

    pub fn contains(&self, x: &[f64; 3]) -> bool {
        (0..3).all(|i| x[i] >= self.lo[i] - 1e-12 && x[i] <= self.hi[i] + 1e-12)
    }

    pub fn diameter(&self) -> f64 {
        (0..3).map(|i| (self.hi[i] - self.lo[i]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.lo[i] + self.hi[i]))
    }
}

/// Extends γ from the box Ω = [lo, hi] to a periodic box of side
/// `box_scale`·diam(Ω). The far-field constant is the mean of γ over ∂Ω
/// (sampled on a face grid).
pub fn extend_gamma(
    gamma: Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync>,
    lo: [f64; 3],
    hi: [f64; 3],
    box_scale: f64,
) -> Result<GammaExtension> {
    if (0..3).any(|i| !(hi[i] > lo[i])) {
        return Err(Error::invalid("Ω must have positive extent"));
    }
    let diam = (0..3).map(|i| (hi[i] - lo[i]).powi(2)).sum::<f64>().sqrt();
    // the rotated box must contain Ω plus the collar in every orientation:
    // half side ≥ diam/2 + collar
    let half = 0.5 * box_scale * diam;
    let collar = 0.6 * (half - 0.5 * diam);
    if !(collar > 0.05 * diam) {
        return Err(Error::invalid(format!("box scale {box_scale} too small to contain Ω and a blending collar")));
    }
    let n = 24;
    let (mut sum, mut count) = (0.0, 0usize);
    for axis in 0..3 {
        for side in [lo[axis], hi[axis]] {
            for a in 0..=n {
                for b in 0..=n {
                    let mut p = [0.0; 3];
                    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                    p[axis] = side;
                    p[i] = lo[i] + (hi[i] - lo[i]) * a as f64 / n as f64;
                    p[j] = lo[j] + (hi[j] - lo[j]) * b as f64 / n as f64;
                    let g = gamma.as_ref()(&p);
                    if !(g > 0.0) {
                        return Err(Error::invalid("γ must be strictly positive on Ω̄"));
                    }
                    sum += g;
                    count += 1;
                }
            }
        }
    }
    Ok(GammaExtension {
        gamma,
        lo,
        hi,
        constant: sum / count as f64,
        collar,
    })
}

/// Cubic grid of N³ points on a box of side L with orthonormal frame
/// `frame` (columns are the box axes in physical coordinates).
struct BoxGrid {
    n: usize,
    side: f64,
    center: [f64; 3],
    frame: [[f64; 3]; 3],
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl BoxGrid {
    fn new(n: usize, side: f64, center: [f64; 3], frame: [[f64; 3]; 3]) -> Self {
        let mut planner = FftPlanner::new();
        BoxGrid {
            n,
            side,
            center,
            frame,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    fn h(&self) -> f64 {
        self.side / self.n as f64
    }

    /// Local coordinates y of grid point (i, j, k); index = (i·N + j)·N + k.
    fn local(&self, idx: usize) -> [f64; 3] {
        let n = self.n;
        let ijk = [idx / (n * n), (idx / n) % n, idx % n];
        ijk.map(|m| (m as f64 - n as f64 / 2.0) * self.h())
    }

    fn physical(&self, idx: usize) -> [f64; 3] {
        let y = self.local(idx);
        let mut x = self.center;
        for a in 0..3 {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += self.frame[a][i] * y[a];
            }
        }
        x
    }

    /// Integer lattice index of FFT bin m.
    fn freq(&self, m: usize) -> f64 {
        let n = self.n;
        if m < n.div_ceil(2) {
            m as f64
        } else {
            m as f64 - n as f64
        }
    }

    /// Local wavevector of bin (a, b, c) with the half shift on axis 0.
    fn wavevector(&self, idx: usize, shift: f64) -> [f64; 3] {
        let n = self.n;
        let s = 2.0 * PI / self.side;
        [
            s * (self.freq(idx / (n * n)) + shift),
            s * self.freq((idx / n) % n),
            s * self.freq(idx % n),
        ]
    }

    fn fft3(&self, data: &mut [C64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        // axis 2 is contiguous
        plan.process(data);
        let mut line = vec![C64::new(0.0, 0.0); n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    line[j] = data[(i * n + j) * n + k];
                }
                plan.process(&mut line);
                for j in 0..n {
                    data[(i * n + j) * n + k] = line[j];
                }
            }
        }
        for j in 0..n {
            for k in 0..n {
                for i in 0..n {
                    line[i] = data[(i * n + j) * n + k];
                }
                plan.process(&mut line);
                for i in 0..n {
                    data[(i * n + j) * n + k] = line[i];
                }
            }
        }
        if inverse {
            let s = 1.0 / self.len() as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Applies a Fourier multiplier on the lattice shifted by `shift` steps
    /// along axis 0 (functions of the form e^{iπy₀/L}·periodic for ½).
    fn apply_multiplier(&self, u: &[C64], shift: f64, m: impl Fn(&[f64; 3]) -> C64) -> Vec<C64> {
        let twist = |idx: usize, sign: f64| {
            let y0 = self.local(idx)[0];
            C64::from_polar(1.0, sign * 2.0 * PI * shift * y0 / self.side)
        };
        let mut v: Vec<C64> = if shift == 0.0 {
            u.to_vec()
        } else {
            u.iter().enumerate().map(|(i, z)| z * twist(i, -1.0)).collect()
        };
        self.fft3(&mut v, false);
        for (idx, z) in v.iter_mut().enumerate() {
            *z *= m(&self.wavevector(idx, shift));
        }
        self.fft3(&mut v, true);
        if shift != 0.0 {
            v.iter_mut().enumerate().for_each(|(i, z)| *z *= twist(i, 1.0));
        }
        v
    }
}

fn frame_for(rho: &[C64; 3]) -> [[f64; 3]; 3] {
    let im = [rho[0].im, rho[1].im, rho[2].im];
    let n = rnorm(&im);
    let e0 = if n > 0.0 { [im[0] / n, im[1] / n, im[2] / n] } else { [1.0, 0.0, 0.0] };
    let [a, b] = orthonormal_pair(&e0);
    [e0, a, b]
}

/// Remainder solution r_ρ and its diagnostics.
#[derive(Clone, Debug)]
pub struct CgoSolution {
    pub rho: [C64; 3],
    pub grid: usize,
    pub side: f64,
    /// Box axes in physical coordinates (rows).
    pub frame: [[f64; 3]; 3],
    pub center: [f64; 3],
    /// Remainder on the grid, index (i·N + j)·N + k.
    pub remainder: Vec<C64>,
    /// ‖r_ρ‖_{L²(Ω)}.
    pub remainder_l2: f64,
    /// ‖(Δ + 2iρ·∇)r − q(1 + r)‖ / ‖q‖ on the grid.
    pub residual: f64,
    pub iterations: usize,
    /// "fixed-point" or "gmres".
    pub method: &'static str,
    /// |ρ| / (2‖q‖_∞): the contraction heuristic (≥ 1 suggests contraction).
    pub contraction_heuristic: f64,
    pub q_sup: f64,
}

impl CgoSolution {
    pub fn to_json(&self) -> Value {
        json!({
            "rho_abs": cnorm(&self.rho),
            "grid": self.grid,
            "side": self.side,
            "remainder_l2": self.remainder_l2,
            "residual": self.residual,
            "iterations": self.iterations,
            "method": self.method,
            "contraction_heuristic": self.contraction_heuristic,
        })
    }
}

/// Potential q = Δ√γ/√γ on the grid and √γ values.
fn potential(grid: &BoxGrid, ext: &GammaExtension) -> (Vec<C64>, Vec<f64>) {
    let sq: Vec<f64> = (0..grid.len()).map(|i| ext.eval(&grid.physical(i)).sqrt()).collect();
    let c = ext.constant.sqrt();
    let dev: Vec<C64> = sq.iter().map(|v| C64::new(v - c, 0.0)).collect();
    let lap = grid.apply_multiplier(&dev, 0.0, |k| C64::new(-rdot(k, k), 0.0));
    let q = lap.iter().zip(&sq).map(|(l, s)| C64::new(l.re / s, 0.0)).collect();
    (q, sq)
}

fn l2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Restarted GMRES for (I − G q) r = b with G the multiplier inverse.
fn gmres(apply: &dyn Fn(&[C64]) -> Vec<C64>, b: &[C64], tol: f64, restart: usize, max_iter: usize) -> (Vec<C64>, usize, f64) {
    let n = b.len();
    let mut x = vec![C64::new(0.0, 0.0); n];
    let bn = l2(b).max(f64::MIN_POSITIVE);
    let mut total = 0;
    loop {
        let ax = apply(&x);
        let r: Vec<C64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let beta = l2(&r);
        if beta / bn <= tol || total >= max_iter {
            return (x, total, beta / bn);
        }
        let mut v: Vec<Vec<C64>> = vec![r.iter().map(|z| z / beta).collect()];
        let mut h = vec![vec![C64::new(0.0, 0.0); restart]; restart + 1];
        let mut cs = vec![C64::new(0.0, 0.0); restart];
        let mut sn = vec![C64::new(0.0, 0.0); restart];
        let mut g = vec![C64::new(0.0, 0.0); restart + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;
        for k in 0..restart {
            let mut w = apply(&v[k]);
            for (i, vi) in v.iter().enumerate() {
                let hij: C64 = vi.iter().zip(&w).map(|(a, c)| a.conj() * c).sum();
                h[i][k] = hij;
                w.iter_mut().zip(vi).for_each(|(wz, vz)| *wz -= hij * vz);
            }
            let wn = l2(&w);
            h[k + 1][k] = C64::new(wn, 0.0);
            for i in 0..k {
                let t = cs[i].conj() * h[i][k] + sn[i].conj() * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let (a, c) = (h[k][k], h[k + 1][k]);
            let den = (a.norm_sqr() + c.norm_sqr()).sqrt();
            cs[k] = a / den;
            sn[k] = c / den;
            h[k][k] = C64::new(den, 0.0);
            h[k + 1][k] = C64::new(0.0, 0.0);
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k].conj() * g[k];
            total += 1;
            k_used = k + 1;
            if wn > 0.0 {
                v.push(w.iter().map(|z| z / wn).collect());
            }
            if g[k + 1].norm() / bn <= tol || wn == 0.0 || total >= max_iter {
                break;
            }
        }
        let mut y = vec![C64::new(0.0, 0.0); k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&v[j]).for_each(|(xz, vz)| *xz += yj * vz);
        }
    }
}

/// Solves for the remainder r_ρ on a periodic box of `box_scale`·diam(Ω)
/// (box_scale as in `extend_gamma`) with `grid` points per axis.
pub fn solve_remainder(ext: &GammaExtension, rho: &[C64; 3], grid: usize, box_scale: f64) -> Result<CgoSolution> {
    if cdot(rho, rho).norm() > 1e-9 * (1.0 + cnorm(rho).powi(2)) {
        return Err(Error::invalid("ρ·ρ must vanish"));
    }
    if grid < 8 {
        return Err(Error::invalid("grid must have at least 8 points per axis"));
    }
    let side = box_scale * ext.diameter();
    let frame = frame_for(rho);
    let g = BoxGrid::new(grid, side, ext.center(), frame);
    // ρ in local coordinates
    let rho_l: [C64; 3] = [0, 1, 2].map(|a| (0..3).map(|i| rho[i] * frame[a][i]).sum());
    let shift = 0.5;
    let min_symbol = 2.0 * rho_l[0].im.abs() * PI / side;
    if !(min_symbol > 1e-8) {
        return Err(Error::solver("symbol vanishes on the shifted lattice (Im ρ = 0)"));
    }
    let (q, _) = potential(&g, ext);
    let q_sup = q.iter().fold(0.0f64, |a, z| a.max(z.norm()));
    let heuristic = if q_sup > 0.0 { cnorm(rho) / (2.0 * q_sup) } else { f64::INFINITY };
    let n = g.len();
    let inside: Vec<bool> = (0..n).map(|i| ext.contains(&g.physical(i))).collect();
    let dv = g.h().powi(3);
    let solve_g = |f: &[C64]| g.apply_multiplier(f, shift, |k| 1.0 / symbol(&rho_l, k));
    if q_sup == 0.0 {
        return Ok(CgoSolution {
            rho: *rho,
            grid,
            side,
            frame,
            center: g.center,
            remainder: vec![C64::new(0.0, 0.0); n],
            remainder_l2: 0.0,
            residual: 0.0,
            iterations: 0,
            method: "fixed-point",
            contraction_heuristic: heuristic,
            q_sup,
        });
    }
    // fixed point r ← G[q(1 + r)]
    let mut r = vec![C64::new(0.0, 0.0); n];
    let mut iterations = 0;
    let mut method = "fixed-point";
    let mut converged = false;
    let mut prev_inc = f64::INFINITY;
    for it in 0..MAX_FIXED_POINT {
        let f: Vec<C64> = q.iter().zip(&r).map(|(qi, ri)| qi * (1.0 + ri)).collect();
        let next = solve_g(&f);
        let inc = l2(&next.iter().zip(&r).map(|(a, b)| a - b).collect::<Vec<_>>());
        let scale = l2(&next).max(f64::MIN_POSITIVE);
        r = next;
        iterations = it + 1;
        if inc <= REMAINDER_TOL * scale {
            converged = true;
            break;
        }
        if it > 3 && inc > 0.999 * prev_inc {
            break;
        }
        prev_inc = inc;
    }
    if !converged {
        // the map is not a contraction here: solve (I − Gq) r = G q by GMRES
        method = "gmres";
        let b = solve_g(&q);
        let apply = |x: &[C64]| -> Vec<C64> {
            let f: Vec<C64> = q.iter().zip(x).map(|(qi, xi)| qi * xi).collect();
            let gx = solve_g(&f);
            x.iter().zip(&gx).map(|(a, c)| a - c).collect()
        };
        let (x, its, rel) = gmres(&apply, &b, REMAINDER_TOL, 60, 600);
        iterations += its;
        if rel > REMAINDER_TOL * 10.0 {
            return Err(Error::solver(format!(
                "remainder iteration did not converge (relative residual {rel:e}, |ρ|/(2‖q‖∞) = {heuristic:.3})"
            )));
        }
        r = x;
    }
    let lhs = g.apply_multiplier(&r, shift, |k| symbol(&rho_l, k));
    let res: Vec<C64> = lhs.iter().zip(&q).zip(&r).map(|((l, qi), ri)| l - qi * (1.0 + ri)).collect();
    let residual = l2(&res) / l2(&q);
    let remainder_l2 = r
        .iter()
        .zip(&inside)
        .filter(|(_, &ins)| ins)
        .map(|(z, _)| z.norm_sqr())
        .sum::<f64>()
        .sqrt()
        * dv.sqrt();
    Ok(CgoSolution {
        rho: *rho,
        grid,
        side,
        frame,
        center: g.center,
        remainder: r,
        remainder_l2,
        residual,
        iterations,
        method,
        contraction_heuristic: heuristic,
        q_sup,
    })
}

/// One row of a remainder sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub rho_abs: f64,
    pub remainder_l2: f64,
    pub residual: f64,
    pub method: &'static str,
}

/// ‖r_ρ‖ over a list of |ρ| at fixed ξ, and the log-log slope.
pub fn remainder_sweep(ext: &GammaExtension, xi: &[f64], radii: &[f64], grid: usize, box_scale: f64) -> Result<(Vec<SweepRow>, f64)> {
    let mut rows = Vec::new();
    for &r in radii {
        let pair = make_phase_pair(xi, r)?;
        let sol = solve_remainder(ext, &pair.rho1, grid, box_scale)?;
        rows.push(SweepRow {
            rho_abs: pair.magnitude,
            remainder_l2: sol.remainder_l2,
            residual: sol.residual,
            method: sol.method,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.remainder_l2 > 0.0)
        .map(|r| (r.rho_abs.ln(), r.remainder_l2.ln()))
        .collect();
    Ok((rows, fit_slope(&pts)))
}

/// Least-squares slope of y against x.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("rho_abs,remainder_l2,residual\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{}\n",
            crate::io::fmt17(r.rho_abs),
            crate::io::fmt17(r.remainder_l2),
            crate::io::fmt17(r.residual)
        ));
    }
    s
}

/// Smooth test functions vanishing on ∂Ω for the weak identity check:
/// sin(jπx/L₁)sin(kπy/L₂) for 1 ≤ j, k ≤ 3.
fn identity_tests(mesh: &Mesh) -> Vec<ScalarField> {
    let (lx, ly) = match mesh.shape {
        crate::mesh::Shape::Box { lengths } => (lengths[0], lengths[1]),
        _ => (1.0, 1.0),
    };
    let mut out = Vec::new();
    for j in 1..=3 {
        for k in 1..=3 {
            out.push(ScalarField::from_fn(mesh, |p| {
                (j as f64 * PI * p[0] / lx).sin() * (k as f64 * PI * p[1] / ly).sin()
            }));
        }
    }
    out
}

/// Discrepancy between ∫φ γ∇w₁·∇w₂ and ½∫φ ∇·(γ∇(w₁w₂)) = −½∫γ∇(w₁w₂)·∇φ
/// over smooth φ vanishing on ∂Ω (2D boxes), relative to the largest left
/// side (absolute when every left side vanishes).
pub fn product_identity_check(mesh: &Mesh, gamma: &ScalarField, w1: &ScalarField, w2: &ScalarField) -> Result<f64> {
    if mesh.dim != 2 {
        return Err(Error::invalid("the identity check is implemented on 2D meshes"));
    }
    gamma.check_mesh(mesh)?;
    w1.check_mesh(mesh)?;
    w2.check_mesh(mesh)?;
    let prod = ScalarField::new(w1.values.iter().zip(&w2.values).map(|(a, b)| a * b).collect());
    let gm = fem::element_means(mesh, &gamma.values);
    let tests = identity_tests(mesh);
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for phi in &tests {
        let (mut lhs, mut rhs) = (0.0, 0.0);
        let pm = fem::element_means(mesh, &phi.values);
        for e in 0..mesh.elements.len() {
            let vol = mesh.geometry(e).volume;
            let g1 = fem::element_gradient(mesh, e, &w1.values);
            let g2 = fem::element_gradient(mesh, e, &w2.values);
            let gp = fem::element_gradient(mesh, e, &prod.values);
            let gphi = fem::element_gradient(mesh, e, &phi.values);
            lhs += vol * pm[e] * gm[e] * (g1[0] * g2[0] + g1[1] * g2[1]);
            rhs += -0.5 * vol * gm[e] * (gp[0] * gphi[0] + gp[1] * gphi[1]);
        }
        worst = worst.max((lhs - rhs).abs());
        scale = scale.max(lhs.abs());
    }
    Ok(if scale > 1e-12 { worst / scale } else { worst })
}

/// Numerical rank of a product family against a smooth basis.
#[derive(Clone, Debug)]
pub struct RankReport {
    pub rank: usize,
    pub basis_dim: usize,
    pub probe_count: usize,
    pub singular_values: Vec<f64>,
    /// σ_{basis_dim}/σ₁ (0 when fewer singular values exist).
    pub ratio: f64,
}

impl RankReport {
    pub fn full_rank(&self) -> bool {
        self.rank == self.basis_dim
    }

    pub fn to_json(&self) -> Value {
        json!({
            "rank": self.rank,
            "basis_dim": self.basis_dim,
            "probe_count": self.probe_count,
            "singular_values": self.singular_values,
            "ratio": self.ratio,
        })
    }
}

/// Rank of the matrix of projections (rows: products, columns: basis
/// functions), singular values above 1e-8 relative.
pub fn projection_rank(rows: &[Vec<f64>], basis_dim: usize) -> Result<RankReport> {
    if rows.is_empty() {
        return Err(Error::invalid("no probe products"));
    }
    let m = DMatrix::from_fn(rows.len(), basis_dim, |i, j| rows[i][j]);
    let sv = m.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let top = s.first().copied().unwrap_or(0.0);
    let rank = s.iter().filter(|&&v| v > 1e-8 * top && top > 0.0).count();
    let ratio = if s.len() >= basis_dim && top > 0.0 { s[basis_dim - 1] / top } else { 0.0 };
    Ok(RankReport {
        rank,
        basis_dim,
        probe_count: rows.len(),
        singular_values: s,
        ratio,
    })
}

/// Degree-ordered cosine basis on a box: Πᵢ cos(aᵢπ(xᵢ−loᵢ)/Lᵢ).
fn cosine_indices(dim: usize, count: usize) -> Vec<[usize; 3]> {
    let mut idx = Vec::new();
    let mut deg = 0;
    while idx.len() < count {
        for a in 0..=deg {
            for b in 0..=(deg - a) {
                let c = deg - a - b;
                if dim == 2 && c != 0 {
                    continue;
                }
                if idx.len() < count {
                    idx.push([a, b, c]);
                }
            }
        }
        deg += 1;
    }
    idx
}

fn cosine(idx: &[usize; 3], p: &[f64], lo: &[f64; 3], len: &[f64; 3], dim: usize) -> f64 {
    (0..dim).map(|i| (idx[i] as f64 * PI * (p[i] - lo[i]) / len[i]).cos()).product()
}

/// Elementwise products γ∇w₁·∇w₂ projected on a cosine basis (2D/3D meshes).
pub fn project_products(mesh: &Mesh, products: &[Vec<f64>], basis_dim: usize) -> Vec<Vec<f64>> {
    let lengths = match mesh.shape {
        crate::mesh::Shape::Box { lengths } => lengths,
        _ => [2.0, 2.0, 2.0],
    };
    let lo = match mesh.shape {
        crate::mesh::Shape::Disk { radius } => [-radius, -radius, 0.0],
        _ => [0.0; 3],
    };
    let idx = cosine_indices(mesh.dim, basis_dim);
    let basis: Vec<Vec<f64>> = idx
        .iter()
        .map(|ix| {
            (0..mesh.elements.len())
                .map(|e| cosine(ix, &mesh.centroid(e), &lo, &lengths, mesh.dim) * mesh.geometry(e).volume)
                .collect()
        })
        .collect();
    products
        .iter()
        .map(|p| basis.iter().map(|b| b.iter().zip(p).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Density test on a 2D mesh: probes are conductivity solutions with the
/// boundary data Re/Im of harmonic exponentials e^{k(x cosθ + y sinθ)}
/// e^{ik(−x sinθ + y cosθ)}, paired at random; their products γ∇w₁·∇w₂
/// are projected on `basis_dim` cosines.
pub fn density_gram_test(mesh: Arc<Mesh>, gamma: &ScalarField, probe_count: usize, basis_dim: usize, seed: u64) -> Result<RankReport> {
    if basis_dim == 0 || basis_dim > probe_count {
        return Err(Error::invalid("need 1 ≤ basis_dim ≤ probe_count"));
    }
    let cond = Conductivity::new(mesh.clone(), gamma.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut products = Vec::with_capacity(probe_count);
    let solve = |k: f64, th: f64, imag: bool| -> Result<ScalarField> {
        let h = BoundaryTrace::from_fn(&mesh, |p| {
            let a = k * (p[0] * th.cos() + p[1] * th.sin());
            let b = k * (-p[0] * th.sin() + p[1] * th.cos());
            a.exp() * if imag { b.sin() } else { b.cos() }
        });
        cond.solve(&h)
    };
    for _ in 0..probe_count {
        let k1 = 0.5 + 2.5 * rng.random::<f64>();
        let k2 = 0.5 + 2.5 * rng.random::<f64>();
        let t1 = 2.0 * PI * rng.random::<f64>();
        let t2 = 2.0 * PI * rng.random::<f64>();
        let w1 = solve(k1, t1, rng.random::<bool>())?;
        let w2 = solve(k2, t2, rng.random::<bool>())?;
        products.push(element_products(&mesh, gamma, &w1, &w2));
    }
    projection_rank(&project_products(&mesh, &products, basis_dim), basis_dim)
}

/// Elementwise γ̄∇w₁·∇w₂.
pub fn element_products(mesh: &Mesh, gamma: &ScalarField, w1: &ScalarField, w2: &ScalarField) -> Vec<f64> {
    let gm = fem::element_means(mesh, &gamma.values);
    (0..mesh.elements.len())
        .map(|e| {
            let a = fem::element_gradient(mesh, e, &w1.values);
            let b = fem::element_gradient(mesh, e, &w2.values);
            gm[e] * (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
        })
        .collect()
}

/// Density test in 3D with CGO products. Each probe draws ξ at random,
/// builds a phase pair with |ρ| ≥ `radius`, solves both remainders and
/// projects γ∇w₁·∇w₂ (real and imaginary parts as separate rows) on a
/// cosine basis of Ω.
pub fn density_gram_test_cgo(
    ext: &GammaExtension,
    probe_count: usize,
    basis_dim: usize,
    radius: f64,
    grid: usize,
    seed: u64,
) -> Result<RankReport> {
    if basis_dim == 0 || basis_dim > probe_count {
        return Err(Error::invalid("need 1 ≤ basis_dim ≤ probe_count"));
    }
    let box_scale = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = cosine_indices(3, basis_dim);
    let len = [0, 1, 2].map(|i| ext.hi[i] - ext.lo[i]);
    let mut rows = Vec::new();
    for _ in 0..probe_count {
        let xi: [f64; 3] = [0; 3].map(|_| 2.0 * PI * (2.0 * rng.random::<f64>() - 1.0));
        let pair = make_phase_pair(&xi, radius)?;
        let s1 = solve_remainder(ext, &pair.rho1, grid, box_scale)?;
        let s2 = solve_remainder(ext, &pair.rho2, grid, box_scale)?;
        let f1 = cgo_gradient_factor(ext, &s1);
        let f2 = cgo_gradient_factor(ext, &s2);
        // the grids of the two solves differ in orientation; evaluate both
        // on Ω by trilinear-free resampling: use a tensor grid on Ω
        let m = 12;
        let h = len.map(|l| l / m as f64);
        let mut re = vec![0.0; basis_dim];
        let mut im = vec![0.0; basis_dim];
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    let p = [
                        ext.lo[0] + (a as f64 + 0.5) * h[0],
                        ext.lo[1] + (b as f64 + 0.5) * h[1],
                        ext.lo[2] + (c as f64 + 0.5) * h[2],
                    ];
                    let g1 = f1(&p);
                    let g2 = f2(&p);
                    let phase = C64::from_polar(1.0, rdot(&xi, &p));
                    let val = phase * ext.eval(&p) * cdot(&g1, &g2);
                    let w = h[0] * h[1] * h[2];
                    for (j, ix) in idx.iter().enumerate() {
                        let bj = cosine(ix, &p, &ext.lo, &len, 3) * w;
                        re[j] += val.re * bj;
                        im[j] += val.im * bj;
                    }
                }
            }
        }
        rows.push(re);
        rows.push(im);
    }
    let mut rep = projection_rank(&rows, basis_dim)?;
    rep.probe_count = probe_count;
    Ok(rep)
}

/// x ↦ e^{−iρ·x}∇w_ρ(x) = iρ u + ∇u with u = γ^{-1/2}(1 + r), evaluated by
/// trigonometric interpolation of the grid data.
fn cgo_gradient_factor<'a>(ext: &'a GammaExtension, sol: &'a CgoSolution) -> impl Fn(&[f64; 3]) -> [C64; 3] + 'a {
    let g = BoxGrid::new(sol.grid, sol.side, sol.center, sol.frame);
    let n = g.len();
    // spectral coefficients of the twisted remainder
    let twist = |idx: usize, sign: f64| C64::from_polar(1.0, sign * PI * g.local(idx)[0] / g.side);
    let mut rhat: Vec<C64> = sol.remainder.iter().enumerate().map(|(i, z)| z * twist(i, -1.0)).collect();
    g.fft3(&mut rhat, false);
    let scale = 1.0 / n as f64;
    let modes: Vec<([f64; 3], C64)> = (0..n)
        .filter_map(|i| {
            let c = rhat[i] * scale;
            (c.norm() > 1e-14).then(|| (g.wavevector(i, 0.5), c))
        })
        .collect();
    let rho = sol.rho;
    let frame = sol.frame;
    let center = sol.center;
    move |x: &[f64; 3]| {
        let mut y = [0.0; 3];
        for a in 0..3 {
            y[a] = (0..3).map(|i| frame[a][i] * (x[i] - center[i])).sum();
        }
        let mut r = C64::new(0.0, 0.0);
        let mut gr_local = [C64::new(0.0, 0.0); 3];
        for (k, c) in &modes {
            let e = c * C64::from_polar(1.0, rdot(k, &y));
            r += e;
            for a in 0..3 {
                gr_local[a] += e * C64::new(0.0, k[a]);
            }
        }
        let mut grad_r = [C64::new(0.0, 0.0); 3];
        for i in 0..3 {
            grad_r[i] = (0..3).map(|a| gr_local[a] * frame[a][i]).sum();
        }
        // γ^{-1/2} and its gradient by central differences of the smooth
        // extension
        let hstep = 1e-5;
        let gam = ext.eval(x);
        let inv_sqrt = gam.powf(-0.5);
        let mut grad_is = [0.0; 3];
        for i in 0..3 {
            let mut xp = *x;
            let mut xm = *x;
            xp[i] += hstep;
            xm[i] -= hstep;
            grad_is[i] = (ext.eval(&xp).powf(-0.5) - ext.eval(&xm).powf(-0.5)) / (2.0 * hstep);
        }
        let u = (1.0 + r) * inv_sqrt;
        [0, 1, 2].map(|i| C64::new(0.0, 1.0) * rho[i] * u + grad_is[i] * (1.0 + r) + inv_sqrt * grad_r[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    fn bump(amp: f64) -> Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync> {
        Arc::new(move |p: &[f64; 3]| {
            let r2 = (p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2) + (p[2] - 0.5).powi(2);
            1.0 + amp * (-r2 / 0.05).exp()
        })
    }

    #[test]
    fn phase_pair_examples() {
        let p = phase_pair_with_t([2.0, 0.0, 0.0], 1.0).unwrap();
        assert!(p.defect() < PHASE_TOL);
        let r1 = p.rho1;
        assert!((r1[0] - C64::new(1.0, 0.0)).norm() < 1e-15);
        // ρ₁ = (1, ±1, ±i√2) up to the orientation of η₁, η₂
        assert!((r1[1].norm() - 1.0).abs() < 1e-15 && (r1[2].im.abs() - 2f64.sqrt()).abs() < 1e-15);
        let p0 = phase_pair_with_t([2.0, 0.0, 0.0], 0.0).unwrap();
        assert!(p0.defect() < PHASE_TOL);
        let big = make_phase_pair(&[1.0, 1.0, 0.0], 50.0).unwrap();
        assert!(big.magnitude >= 50.0 && big.defect() < PHASE_TOL * 100.0);
        assert!(make_phase_pair(&[1.0, 0.0], 1.0).is_err());
        assert!(make_phase_pair(&[0.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn extension_properties() {
        let one: Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync> = Arc::new(|_: &[f64; 3]| 1.0);
        let e = extend_gamma(one, [0.0; 3], [1.0; 3], 2.0).unwrap();
        assert_eq!(e.eval(&[2.0, -1.0, 0.3]), 1.0);
        let g = bump(0.5);
        let e = extend_gamma(g.clone(), [0.0; 3], [1.0; 3], 2.0).unwrap();
        for p in [[0.5, 0.5, 0.5], [0.0, 0.3, 1.0], [0.1, 0.9, 0.2]] {
            assert_eq!(e.eval(&p), g(&p));
        }
        assert!(extend_gamma(bump(0.5), [0.0; 3], [1.0; 3], 1.0).is_err());
    }

    #[test]
    fn constant_gamma_has_zero_remainder() {
        let one: Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync> = Arc::new(|_: &[f64; 3]| 2.0);
        let e = extend_gamma(one, [0.0; 3], [1.0; 3], 2.0).unwrap();
        let pair = make_phase_pair(&[1.0, 1.0, 0.0], 20.0).unwrap();
        let s = solve_remainder(&e, &pair.rho1, 16, 2.0).unwrap();
        assert!(s.remainder_l2 <= 1e-12);
    }

    #[test]
    fn remainder_solves_its_equation() {
        let e = extend_gamma(bump(0.5), [0.0; 3], [1.0; 3], 2.0).unwrap();
        let pair = make_phase_pair(&[1.0, 1.0, 0.0], 40.0).unwrap();
        let s = solve_remainder(&e, &pair.rho1, 32, 2.0).unwrap();
        assert!(s.residual < 1e-6, "residual {}", s.residual);
        assert!(s.remainder_l2 > 0.0);
    }

    #[test]
    fn product_identity_cases() {
        let mesh = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[16, 16]).unwrap());
        let one = ScalarField::constant(&mesh, 1.0);
        let c = ScalarField::constant(&mesh, 3.0);
        assert_eq!(product_identity_check(&mesh, &one, &c, &c).unwrap(), 0.0);
        let x = ScalarField::from_fn(&mesh, |p| p[0]);
        let y = ScalarField::from_fn(&mesh, |p| p[1]);
        assert!(product_identity_check(&mesh, &one, &x, &y).unwrap() < 1e-12);
    }

    #[test]
    fn rank_controls() {
        let mesh = build_box_mesh(2, &[1.0, 1.0], &[8, 8]).unwrap();
        let g = ScalarField::constant(&mesh, 1.0);
        let x = ScalarField::from_fn(&mesh, |p| p[0]);
        let prod = element_products(&mesh, &g, &x, &x);
        let r = projection_rank(&project_products(&mesh, &[prod.clone()], 1), 1).unwrap();
        assert_eq!(r.rank, 1);
        let same = vec![prod; 12];
        let r = projection_rank(&project_products(&mesh, &same, 10), 10).unwrap();
        assert_eq!(r.rank, 1);
    }
}
