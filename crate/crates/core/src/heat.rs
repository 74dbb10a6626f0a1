//! Anisotropic heat equation with Joule heating and the boundary measurement
//! maps Σ (voltage to heat flux) and Ξ (source to heat flux).
//!
//! The semi-discrete equation is M_κ ψ̇ + K ψ = s(t) b, where b is the load
//! vector of the spatial source and s(t) the squared source envelope.

use std::sync::{Arc, OnceLock};

use serde_json::{json, Value};

use crate::elliptic::{assemble_p, Conductivity, OperatorP, SpectralData, CLUSTER_RTOL};
use crate::error::{Error, Result};
use crate::fem;
use crate::linalg::{self, BandedCholesky, Csr};
use crate::mesh::{boundary_lumped_mass, BoundaryTrace, Mesh, ScalarField, TensorField};

const GL8_X: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_W: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// 8-point Gauss–Legendre rule on [a, b].
pub fn gauss8(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    GL8_X.iter().zip(&GL8_W).map(|(x, w)| w * f(c + h * x)).sum::<f64>() * h
}

/// Composite Gauss–Legendre with `pieces` equal sub-intervals.
pub fn gauss8_composite(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    let h = (b - a) / pieces as f64;
    (0..pieces).map(|k| gauss8(&f, a + k as f64 * h, a + (k + 1) as f64 * h)).sum()
}

/// Adaptive Gauss–Legendre quadrature to absolute tolerance `tol`.
pub fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> f64 {
        let m = 0.5 * (a + b);
        let l = gauss8(f, a, m);
        let r = gauss8(f, m, b);
        if depth == 0 || (l + r - whole).abs() <= tol {
            l + r
        } else {
            rec(f, a, m, l, 0.5 * tol, depth - 1) + rec(f, m, b, r, 0.5 * tol, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    rec(f, a, b, gauss8(f, a, b), tol, 30)
}

fn smoothstep5(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

fn bump_raw(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (s * (1.0 - s))).exp()
    }
}

/// Normalization making ∫₀¹ χ² = 1 for χ = C·exp(−1/(s(1−s))).
fn bump_constant() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let i = gauss8_composite(|s| bump_raw(s).powi(2), 0.0, 1.0, 256);
        1.0 / i.sqrt()
    })
}

/// Pulse profile χ supported on [0, 1] with ∫χ² = 1.
pub fn pulse_profile(s: f64) -> f64 {
    bump_constant() * bump_raw(s)
}

/// Time profile multiplying the boundary voltage (or the square root of a
/// prescribed source).
#[derive(Clone, Debug, PartialEq)]
pub enum Envelope {
    /// α(t): 0 for t < 1/2, 1 for t > 1, quintic smoothstep in between.
    Ramp,
    /// χ_ε(t) = ε^{-1/2} χ(t/ε).
    Pulse { epsilon: f64 },
    /// The ε → 0 limit of the pulse: the power is a unit Dirac mass at t = 0.
    Impulse,
    /// Piecewise-linear amplitude through the given (t, value) samples,
    /// constant beyond the last sample.
    Custom(Vec<(f64, f64)>),
}

impl Envelope {
    pub fn validate(&self) -> Result<()> {
        match self {
            Envelope::Pulse { epsilon } if !(*epsilon > 0.0) => Err(Error::invalid("pulse width ε must be positive")),
            Envelope::Custom(p) if p.is_empty() || p.windows(2).any(|w| w[1].0 <= w[0].0) => {
                Err(Error::invalid("custom envelope needs strictly increasing sample times"))
            }
            _ => Ok(()),
        }
    }

    pub fn amplitude(&self, t: f64) -> f64 {
        match self {
            Envelope::Ramp => smoothstep5(2.0 * t - 1.0),
            Envelope::Pulse { epsilon } => pulse_profile(t / epsilon) / epsilon.sqrt(),
            Envelope::Impulse => 0.0,
            Envelope::Custom(pts) => {
                if t <= pts[0].0 {
                    return pts[0].1;
                }
                for w in pts.windows(2) {
                    if t <= w[1].0 {
                        let s = (t - w[0].0) / (w[1].0 - w[0].0);
                        return w[0].1 + s * (w[1].1 - w[0].1);
                    }
                }
                pts.last().unwrap().1
            }
        }
    }

    /// s(t) = amplitude², the factor multiplying the power density.
    pub fn power(&self, t: f64) -> f64 {
        self.amplitude(t).powi(2)
    }

    /// Times where the power is not smooth; the stepper damps after them.
    fn kinks(&self) -> Vec<f64> {
        match self {
            Envelope::Ramp => vec![0.5, 1.0],
            Envelope::Custom(p) => p.iter().map(|q| q.0).collect(),
            Envelope::Pulse { .. } | Envelope::Impulse => Vec::new(),
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Envelope::Ramp => vec![0.5, 1.0],
            Envelope::Pulse { epsilon } => (0..=16).map(|k| epsilon * k as f64 / 16.0).collect(),
            Envelope::Impulse => vec![0.0],
            Envelope::Custom(p) => p.iter().map(|q| q.0).collect(),
        }
    }

    /// ∫_a^b s(t) dt, exact up to quadrature round-off for the built-in kinds.
    pub fn power_integral(&self, a: f64, b: f64) -> f64 {
        if let Envelope::Impulse = self {
            return if a <= 0.0 && b > 0.0 { 1.0 } else { 0.0 };
        }
        let mut cuts: Vec<f64> = vec![a];
        cuts.extend(self.breakpoints().into_iter().filter(|&c| c > a && c < b));
        cuts.push(b);
        let pieces = if matches!(self, Envelope::Pulse { .. }) { 4 } else { 1 };
        cuts.windows(2)
            .map(|w| gauss8_composite(|t| self.power(t), w[0], w[1], pieces))
            .sum()
    }

    pub fn label(&self) -> String {
        match self {
            Envelope::Ramp => "ramp".into(),
            Envelope::Pulse { epsilon } => format!("pulse(eps={epsilon:e})"),
            Envelope::Impulse => "impulse".into(),
            Envelope::Custom(_) => "custom".into(),
        }
    }
}

/// Spatial part of a heat source.
#[derive(Clone, Debug)]
pub enum SpatialSource {
    /// Power density F (right-hand side κF of the heat equation).
    Power(ScalarField),
    /// A field G entering as ψ_t + Pψ = G directly.
    Weighted(ScalarField),
}

impl SpatialSource {
    /// Full nodal load vector.
    pub fn load(&self, p: &OperatorP) -> Vec<f64> {
        match self {
            SpatialSource::Power(f) => p.power_load(f),
            SpatialSource::Weighted(g) => p.weighted_load(g),
        }
    }
}

/// Uniform time grid with sampling stride.
#[derive(Clone, Copy, Debug)]
pub struct TimeGrid {
    pub t_end: f64,
    pub dt: f64,
    /// Record every `stride`-th step (the final step is always recorded).
    pub stride: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Self {
        TimeGrid { t_end, dt, stride: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("time step must be positive"));
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::invalid("t_end must be non-negative"));
        }
        Ok(())
    }
}

/// Time-sampled boundary flux ν·A∇ψ.
#[derive(Clone, Debug, PartialEq)]
pub struct FluxTrace {
    pub times: Vec<f64>,
    /// values[i][k]: flux at time i, boundary node k.
    pub values: Vec<Vec<f64>>,
    /// Mesh node ids of the boundary nodes.
    pub nodes: Vec<usize>,
    /// Boundary quadrature weights per node.
    pub weights: Vec<f64>,
    pub source: String,
}

impl FluxTrace {
    pub fn zeros_like(&self) -> Self {
        FluxTrace {
            values: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
            ..self.clone()
        }
    }

    /// ∫∂Ω flux dS at every sample.
    pub fn total_flux(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.iter().zip(&self.weights).map(|(a, w)| a * w).sum())
            .collect()
    }

    pub fn snapshot(&self, i: usize) -> BoundaryTrace {
        BoundaryTrace::new(self.values[i].clone())
    }

    /// a·self + b·other on the same grid.
    pub fn combine(&self, a: f64, other: &FluxTrace, b: f64) -> Result<FluxTrace> {
        if self.times.len() != other.times.len() || self.nodes != other.nodes {
            return Err(Error::invalid("flux traces live on different grids"));
        }
        Ok(FluxTrace {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| u.iter().zip(v).map(|(x, y)| a * x + b * y).collect())
                .collect(),
            ..self.clone()
        })
    }

    /// Boundary L² norm of every snapshot.
    pub fn snapshot_norms(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.iter().zip(&self.weights).map(|(a, w)| w * a * a).sum::<f64>().sqrt())
            .collect()
    }

    /// CSV with header and (t, node_id, flux) rows, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,node_id,flux\n");
        for (t, row) in self.times.iter().zip(&self.values) {
            for (n, v) in self.nodes.iter().zip(row) {
                s.push_str(&format!("{},{},{}\n", crate::io::fmt17(*t), n, crate::io::fmt17(*v)));
            }
        }
        s
    }

    pub fn summary_json(&self) -> Value {
        json!({
            "source": self.source,
            "times": self.times,
            "total_flux": self.total_flux(),
        })
    }
}

/// Joule power density F = γ∇u·∇u as a nodal field: element values are
/// averaged to nodes with volume weights, which keeps F ≥ 0 and preserves
/// ∫F = ∫γ|∇u|².
pub fn joule_source(mesh: &Mesh, gamma: &ScalarField, u: &ScalarField) -> Result<ScalarField> {
    joule_bilinear(mesh, gamma, u, u)
}

/// Bilinear power density γ∇u·∇v, nodal.
pub fn joule_bilinear(mesh: &Mesh, gamma: &ScalarField, u: &ScalarField, v: &ScalarField) -> Result<ScalarField> {
    gamma.check_mesh(mesh)?;
    u.check_mesh(mesh)?;
    v.check_mesh(mesh)?;
    let gm = fem::element_means(mesh, &gamma.values);
    let per: Vec<f64> = (0..mesh.elements.len())
        .map(|e| {
            let a = fem::element_gradient(mesh, e, &u.values);
            let b = fem::element_gradient(mesh, e, &v.values);
            gm[e] * (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
        })
        .collect();
    Ok(ScalarField::new(fem::element_to_nodal(mesh, &per)))
}

fn combine_same_pattern(a: &Csr, alpha: f64, b: &Csr, beta: f64) -> Csr {
    assert!(a.indptr == b.indptr && a.indices == b.indices);
    Csr {
        data: a.data.iter().zip(&b.data).map(|(x, y)| alpha * x + beta * y).collect(),
        ..a.clone()
    }
}

/// Crank–Nicolson integrator with Rannacher damping: the first two steps,
/// and the two steps starting with the one that crosses an envelope kink,
/// are each replaced by two backward Euler half steps sharing the CN matrix.
/// Without this the stiff modes excited by a kink decay like e^{-4t/(λΔt²)}.
pub struct HeatStepper<'a> {
    p: &'a OperatorP,
    envelope: &'a Envelope,
    load: Vec<f64>,
    load_i: Vec<f64>,
    lhs: BandedCholesky,
    rhs_op: Csr,
    pub dt: f64,
    pub t: f64,
    pub step: usize,
    pub psi: Vec<f64>,
    /// Whether the last step was a damped one.
    pub damped: bool,
    damp_left: usize,
    kinks: Vec<f64>,
}

impl<'a> HeatStepper<'a> {
    pub fn new(p: &'a OperatorP, load: Vec<f64>, envelope: &'a Envelope, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("time step must be positive"));
        }
        if let Envelope::Impulse = envelope {
            return Err(Error::invalid("impulse sources are evaluated spectrally, not by time stepping"));
        }
        envelope.validate()?;
        let lhs = BandedCholesky::factor(&combine_same_pattern(p.mk_ii(), 1.0, p.k_ii(), 0.5 * dt))?;
        let rhs_op = combine_same_pattern(p.mk_ii(), 1.0, p.k_ii(), -0.5 * dt);
        let load_i = p.gather(&load);
        Ok(HeatStepper {
            p,
            envelope,
            load,
            load_i,
            lhs,
            rhs_op,
            dt,
            t: 0.0,
            step: 0,
            psi: vec![0.0; p.interior_dim()],
            damped: false,
            damp_left: 2,
            kinks: envelope.kinks(),
        })
    }

    pub fn advance(&mut self) {
        let dt = self.dt;
        if self.kinks.iter().any(|&k| k > self.t && k <= self.t + dt) {
            self.damp_left = 2;
        }
        self.damped = self.damp_left > 0;
        if self.damped {
            self.damp_left -= 1;
            let mk = self.p.mk_ii();
            for half in 0..2 {
                let t0 = self.t + 0.5 * dt * half as f64;
                let s = self.envelope.power_integral(t0, t0 + 0.5 * dt);
                let mut r = mk.mul(&self.psi);
                linalg::axpy(s, &self.load_i, &mut r);
                self.lhs.solve_in_place(&mut r);
                self.psi = r;
            }
        } else {
            let s = self.envelope.power_integral(self.t, self.t + dt);
            let mut r = self.rhs_op.mul(&self.psi);
            linalg::axpy(s, &self.load_i, &mut r);
            self.lhs.solve_in_place(&mut r);
            self.psi = r;
        }
        self.step += 1;
        self.t = self.step as f64 * dt;
    }

    /// ψ̇ from the semi-discrete equation at the current state.
    pub fn rate(&self) -> Vec<f64> {
        let s = self.envelope.power(self.t);
        let mut r: Vec<f64> = self.p.k_ii().mul(&self.psi).iter().map(|v| -v).collect();
        linalg::axpy(s, &self.load_i, &mut r);
        self.p.mk_factor().solve_in_place(&mut r);
        r
    }

    /// Variational boundary flux at the current state.
    pub fn flux(&self) -> BoundaryTrace {
        let s = self.envelope.power(self.t);
        let rate = self.rate();
        let load: Vec<f64> = self.load.iter().map(|v| s * v).collect();
        self.p.flux(&self.psi, Some(&rate), Some(&load))
    }
}

/// Time history of ψ (nodal) at every recorded step, starting at t = 0.
pub fn evolve_heat(p: &OperatorP, source: &SpatialSource, envelope: &Envelope, grid: TimeGrid) -> Result<(Vec<f64>, Vec<ScalarField>)> {
    grid.validate()?;
    let mut st = HeatStepper::new(p, source.load(p), envelope, grid.dt)?;
    let steps = grid.steps();
    let mut times = vec![0.0];
    let mut states = vec![ScalarField::new(p.scatter(&st.psi))];
    for n in 1..=steps {
        st.advance();
        if n % grid.stride == 0 || n == steps {
            times.push(st.t);
            states.push(ScalarField::new(p.scatter(&st.psi)));
        }
    }
    Ok((times, states))
}

fn run_flux(p: &OperatorP, load: Vec<f64>, envelope: &Envelope, grid: TimeGrid, label: String) -> Result<FluxTrace> {
    grid.validate()?;
    let mut st = HeatStepper::new(p, load, envelope, grid.dt)?;
    let steps = grid.steps();
    let mut times = vec![0.0];
    let mut values = vec![st.flux().values];
    for n in 1..=steps {
        st.advance();
        if n % grid.stride == 0 || n == steps {
            times.push(st.t);
            values.push(st.flux().values);
        }
    }
    Ok(FluxTrace {
        times,
        values,
        nodes: p.mesh.boundary_nodes.clone(),
        weights: boundary_lumped_mass(&p.mesh),
        source: label,
    })
}

/// Modal coefficients d_k = φ_kᵀ b of a load vector and the part of its
/// L²_κ-dual norm not captured by the available modes.
pub fn modal_coefficients(p: &OperatorP, spec: &SpectralData, load: &[f64]) -> (Vec<f64>, f64) {
    let li = p.gather(load);
    let d: Vec<f64> = spec
        .eigenfunctions
        .iter()
        .map(|phi| linalg::dot(&p.gather(&phi.values), &li))
        .collect();
    let total = linalg::dot(&li, &p.mk_factor().solve(&li));
    let captured: f64 = d.iter().map(|x| x * x).sum();
    let tail = if total > 0.0 { ((total - captured) / total).max(0.0) } else { 0.0 };
    (d, tail)
}

/// Result of the spectral impulse evaluation.
#[derive(Clone, Debug)]
pub struct ImpulseResponse {
    pub trace: FluxTrace,
    pub coefficients: Vec<f64>,
    /// Fraction of the source's L²_κ-dual energy outside the modes used.
    pub tail_fraction: f64,
    /// e^{−λ_max t_first}: decay of the truncated modes at the first sample.
    pub tail_decay: f64,
}

/// flux(t) = Σ_k e^{−λ_k t} d_k (ν·A∇φ_k) with d_k = (G, φ_k) in the
/// convention of `SpatialSource`.
pub fn impulse_response(p: &OperatorP, spec: &SpectralData, source: &SpatialSource, times: &[f64]) -> Result<ImpulseResponse> {
    if times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::invalid("impulse response times must be positive"));
    }
    let (d, tail) = modal_coefficients(p, spec, &source.load(p));
    let nb = p.mesh.boundary_nodes.len();
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        let mut row = vec![0.0; nb];
        for (k, lam) in spec.eigenvalues.iter().enumerate() {
            let c = (-lam * t).exp() * d[k];
            if c != 0.0 {
                linalg::axpy(c, &spec.flux_traces[k].values, &mut row);
            }
        }
        values.push(row);
    }
    let lam_max = spec.eigenvalues.last().copied().unwrap_or(0.0);
    let t0 = times.first().copied().unwrap_or(0.0);
    Ok(ImpulseResponse {
        trace: FluxTrace {
            times: times.to_vec(),
            values,
            nodes: p.mesh.boundary_nodes.clone(),
            weights: boundary_lumped_mass(&p.mesh),
            source: "impulse".into(),
        },
        coefficients: d,
        tail_fraction: tail,
        tail_decay: (-lam_max * t0).exp(),
    })
}

/// ψ(t) = Σ_k φ_k d_k ∫₀ᵗ e^{−λ_k(t−s)} s(s) ds from the modal expansion.
/// Fails when the source energy outside the available modes exceeds
/// `tail_tol` (relative).
pub fn duhamel_solution(
    p: &OperatorP,
    spec: &SpectralData,
    source: &SpatialSource,
    envelope: &Envelope,
    t: f64,
    tail_tol: f64,
) -> Result<(ScalarField, f64)> {
    let (d, tail) = modal_coefficients(p, spec, &source.load(p));
    if tail > tail_tol {
        return Err(Error::solver(format!(
            "insufficient modes: relative tail {tail:e} exceeds {tail_tol:e}"
        )));
    }
    let mut psi = vec![0.0; p.mesh.node_count()];
    if t <= 0.0 {
        return Ok((ScalarField::new(psi), tail));
    }
    for (k, &lam) in spec.eigenvalues.iter().enumerate() {
        let w = match envelope {
            Envelope::Impulse => (-lam * t).exp(),
            _ => {
                let mut cuts = vec![0.0];
                cuts.extend(envelope.breakpoints().into_iter().filter(|&c| c > 0.0 && c < t));
                cuts.push(t);
                let f = |s: f64| (-lam * (t - s)).exp() * envelope.power(s);
                cuts.windows(2).map(|c| adaptive(&f, c[0], c[1], 1e-14)).sum()
            }
        };
        linalg::axpy(w * d[k], &spec.eigenfunctions[k].values, &mut psi);
    }
    Ok((ScalarField::new(psi), tail))
}

/// Forward model for fixed (γ, κ, A): realizes Σ_{γ,κ,A} and Ξ_{κ,A}.
pub struct ForwardModel {
    pub conductivity: Conductivity,
    pub operator: OperatorP,
    pub mode_count: usize,
    spectrum: OnceLock<SpectralData>,
}

impl ForwardModel {
    pub fn new(mesh: Arc<Mesh>, gamma: &ScalarField, kappa: &ScalarField, tensor: &TensorField) -> Result<Self> {
        let conductivity = Conductivity::new(mesh.clone(), gamma.clone())?;
        let operator = assemble_p(mesh, kappa, tensor)?;
        Ok(ForwardModel {
            conductivity,
            operator,
            mode_count: 150,
            spectrum: OnceLock::new(),
        })
    }

    pub fn with_mode_count(mut self, n: usize) -> Self {
        self.mode_count = n.max(1);
        self
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.operator.mesh
    }

    /// Spectral data used for impulse sources (computed once).
    pub fn spectral(&self) -> Result<&SpectralData> {
        if let Some(s) = self.spectrum.get() {
            return Ok(s);
        }
        let s = self.operator.spectrum(self.mode_count, CLUSTER_RTOL, 0x5eed)?;
        Ok(self.spectrum.get_or_init(|| s))
    }

    /// Power density γ∇w^h·∇w^{h̃}.
    pub fn power_density(&self, h: &BoundaryTrace, h_tilde: &BoundaryTrace) -> Result<ScalarField> {
        let w = self.conductivity.solve(h)?;
        let wt = self.conductivity.solve(h_tilde)?;
        joule_bilinear(self.mesh(), &self.conductivity.gamma, &w, &wt)
    }

    /// Σ(envelope·h).
    pub fn sigma(&self, h: &BoundaryTrace, envelope: &Envelope, grid: TimeGrid) -> Result<FluxTrace> {
        let f = self.power_density(h, h)?;
        self.xi(&f, envelope, grid)
    }

    /// ¼[Σ(env·(h + h̃)) − Σ(env·(h − h̃))].
    pub fn sigma_polarized(&self, h: &BoundaryTrace, h_tilde: &BoundaryTrace, envelope: &Envelope, grid: TimeGrid) -> Result<FluxTrace> {
        let plus = BoundaryTrace::new(h.values.iter().zip(&h_tilde.values).map(|(a, b)| a + b).collect());
        let minus = BoundaryTrace::new(h.values.iter().zip(&h_tilde.values).map(|(a, b)| a - b).collect());
        let sp = self.sigma(&plus, envelope, grid)?;
        let sm = self.sigma(&minus, envelope, grid)?;
        let mut out = sp.combine(0.25, &sm, -0.25)?;
        out.source = format!("polarized {}", envelope.label());
        Ok(out)
    }

    /// Ξ(envelope²·F) for a prescribed power density F.
    pub fn xi(&self, f: &ScalarField, envelope: &Envelope, grid: TimeGrid) -> Result<FluxTrace> {
        xi_map(&self.operator, f, envelope, grid, || self.spectral())
    }
}

/// Ξ_{κ,A}: boundary flux of the heat equation with source envelope²·F.
/// Impulse envelopes are evaluated with the spectral formula on the sample
/// times dt, 2dt, …, t_end.
pub fn xi_map<'s>(
    p: &OperatorP,
    f: &ScalarField,
    envelope: &Envelope,
    grid: TimeGrid,
    spectral: impl FnOnce() -> Result<&'s SpectralData>,
) -> Result<FluxTrace> {
    f.check_mesh(&p.mesh)?;
    grid.validate()?;
    match envelope {
        Envelope::Impulse => {
            let steps = grid.steps();
            let times: Vec<f64> = (1..=steps)
                .filter(|n| n % grid.stride == 0 || *n == steps)
                .map(|n| n as f64 * grid.dt)
                .collect();
            let spec = spectral()?;
            Ok(impulse_response(p, spec, &SpatialSource::Power(f.clone()), &times)?.trace)
        }
        _ => run_flux(p, p.power_load(f), envelope, grid, envelope.label()),
    }
}

/// Σ_{γ,κ,A}(envelope·h).
pub fn sigma_map(model: &ForwardModel, h: &BoundaryTrace, envelope: &Envelope, grid: TimeGrid) -> Result<FluxTrace> {
    model.sigma(h, envelope, grid)
}

/// Per-step energy balance d/dt ∫κ⁻¹ψ = ∫∂Ω ν·A∇ψ + s(t)∫F: returns
/// (residual, truncation estimate) for every Crank–Nicolson step away from
/// the damped ones, whose first-order error the estimate does not model.
pub fn energy_balance(p: &OperatorP, source: &SpatialSource, envelope: &Envelope, grid: TimeGrid) -> Result<Vec<(f64, f64)>> {
    let load = source.load(p);
    let total_load: f64 = p.gather(&load).iter().sum::<f64>() + {
        // boundary rows of the load enter through the flux definition
        p.mesh.boundary_nodes.iter().map(|&b| load[b]).sum::<f64>()
    };
    let weights = boundary_lumped_mass(&p.mesh);
    let mut st = HeatStepper::new(p, load.clone(), envelope, grid.dt)?;
    let ones = vec![1.0; p.mesh.node_count()];
    let mk_ones = p.mk.mul(&ones);
    let energy = |psi: &[f64]| linalg::dot(&p.gather(&mk_ones), psi);
    // (boundary outflow, source input) at the current state
    let rate_of = |st: &HeatStepper| -> (f64, f64) {
        let b: f64 = st.flux().values.iter().zip(&weights).map(|(a, w)| a * w).sum();
        (b, envelope.power(st.t) * total_load)
    };
    let steps = grid.steps();
    let mut e_prev = energy(&st.psi);
    let mut rates = vec![rate_of(&st)];
    let mut lhs = Vec::with_capacity(steps);
    let mut damped = Vec::with_capacity(steps);
    for _ in 0..steps {
        st.advance();
        damped.push(st.damped);
        let e = energy(&st.psi);
        lhs.push((e - e_prev) / grid.dt);
        e_prev = e;
        rates.push(rate_of(&st));
    }
    let mut out = Vec::new();
    for n in 2..steps.saturating_sub(1) {
        if damped[n - 1..=n + 1].iter().any(|&d| d) {
            continue;
        }
        let total = |k: usize| rates[k].0 + rates[k].1;
        let resid = (lhs[n] - 0.5 * (total(n) + total(n + 1))).abs();
        // Each term carries its own trapezoid error; summing the curvatures
        // keeps the estimate from vanishing where the two cancel.
        let second = |f: &dyn Fn(usize) -> f64| (f(n + 2) - 2.0 * f(n + 1) + f(n)).abs() + (f(n + 1) - 2.0 * f(n) + f(n - 1)).abs();
        let curv = second(&|k| rates[k].0) + second(&|k| rates[k].1);
        let scale = rates.iter().fold(0.0f64, |a, b| a.max(b.0.abs()).max(b.1.abs()));
        out.push((resid, curv / 12.0 + 1e-12 * scale));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    fn unit_model(n: usize) -> ForwardModel {
        let mesh = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[n, n]).unwrap());
        let one = ScalarField::constant(&mesh, 1.0);
        ForwardModel::new(mesh.clone(), &one, &one, &TensorField::identity(&mesh)).unwrap()
    }

    #[test]
    fn ramp_is_flat_outside_blend() {
        let e = Envelope::Ramp;
        assert_eq!(e.amplitude(0.3), 0.0);
        assert_eq!(e.amplitude(1.2), 1.0);
        assert!((e.amplitude(0.75) - 0.5).abs() < 1e-15);
        for k in 0..=100 {
            let a = e.amplitude(k as f64 / 50.0);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn pulse_has_unit_energy() {
        for eps in [1e-3, 0.1, 1.0] {
            let e = Envelope::Pulse { epsilon: eps };
            assert!((e.power_integral(0.0, 2.0 * eps) - 1.0).abs() < 1e-10);
            assert_eq!(e.amplitude(1.5 * eps), 0.0);
        }
    }

    #[test]
    fn joule_of_linear_potential() {
        let mesh = build_box_mesh(2, &[1.0, 1.0], &[4, 4]).unwrap();
        let g = ScalarField::constant(&mesh, 1.0);
        let u = ScalarField::from_fn(&mesh, |p| p[0]);
        let f = joule_source(&mesh, &g, &u).unwrap();
        assert!(f.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let c = joule_source(&mesh, &g, &ScalarField::constant(&mesh, 2.0)).unwrap();
        assert!(c.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_source_gives_zero_flux() {
        let m = unit_model(6);
        let tr = m.sigma(&BoundaryTrace::zeros(m.mesh()), &Envelope::Ramp, TimeGrid::new(1.0, 0.1)).unwrap();
        assert!(tr.values.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(tr.times[0], 0.0);
    }

    #[test]
    fn quadratic_in_voltage() {
        let m = unit_model(6);
        let h = BoundaryTrace::from_fn(m.mesh(), |p| p[0] * p[1] + p[0]);
        let h2 = BoundaryTrace::new(h.values.iter().map(|v| 2.0 * v).collect());
        let g = TimeGrid::new(1.5, 0.05);
        let a = m.sigma(&h, &Envelope::Ramp, g).unwrap();
        let b = m.sigma(&h2, &Envelope::Ramp, g).unwrap();
        for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
            assert!((4.0 * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn single_mode_evolution() {
        let m = unit_model(12);
        let p = &m.operator;
        let spec = p.spectrum(1, CLUSTER_RTOL, 1).unwrap();
        let phi = spec.eigenfunctions[0].clone();
        let lam = spec.eigenvalues[0];
        let src = SpatialSource::Weighted(phi.clone());
        let env = Envelope::Custom(vec![(0.0, 1.0)]);
        let (times, states) = evolve_heat(p, &src, &env, TimeGrid::new(0.1, 1e-4)).unwrap();
        let t = *times.last().unwrap();
        let factor = (1.0 - (-lam * t).exp()) / lam;
        let err: Vec<f64> = states.last().unwrap().values.iter().zip(&phi.values).map(|(a, b)| a - factor * b).collect();
        let rel = linalg::norm(&err) / (factor * linalg::norm(&phi.values));
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn impulse_of_eigenfunction_decays_exponentially() {
        let m = unit_model(10);
        let p = &m.operator;
        let spec = p.spectrum(4, CLUSTER_RTOL, 1).unwrap();
        let src = SpatialSource::Weighted(spec.eigenfunctions[0].clone());
        let r = impulse_response(p, &spec, &src, &[0.05, 0.1]).unwrap();
        for (i, &t) in [0.05, 0.1].iter().enumerate() {
            let c = (-spec.eigenvalues[0] * t).exp();
            for (a, b) in r.trace.values[i].iter().zip(&spec.flux_traces[0].values) {
                assert!((a - c * b).abs() < 1e-10);
            }
        }
    }
}
