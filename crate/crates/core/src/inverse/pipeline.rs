//! Measurement acquisition and the end-to-end identification pipeline.
//!
//! `acquire` plays the experimenter: it owns the true coefficients and
//! records boundary flux traces for a fixed probe protocol. `reconstruct`
//! sees only those traces, the probe expressions and the geometry, and
//! returns the identification report. A measurement directory holds a
//! manifest plus little-endian f64 trace files; truth is written elsewhere.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::dtn_form::{equilibrium_value, DtnForm};
use super::eigenspace::{flux_independence_check, match_eigenspaces, traces_sigma_min};
use super::gamma_fit::{fit_gamma_from_dtn, GammaFit};
use super::kappa::{recover_kappa, KappaEstimate, SeriesFilter};
use super::kappa_fit::{fit_kappa_spectrum, KappaFit};
use super::resample::resample_boundary;
use super::series::{fit_dirichlet_series, DirichletSeriesFit, SeriesCluster};
use crate::config::{sample_tensor, DomainSpec, ExperimentConfig, MapKind, ReconstructSpec, SourcedExpr};
use crate::elliptic::{assemble_p, Conductivity, SpectralData};
use crate::error::{Error, Result};
use crate::heat::{joule_bilinear, Envelope, FluxTrace, ForwardModel, TimeGrid};
use crate::io::{read_f64, read_json, write_f64, write_json};
use crate::linalg;
use crate::mesh::{boundary_lumped_mass, BoundaryTrace, Mesh, ScalarField};

/// Lower bound imposed on fitted γ and κ.
pub const FIT_LOWER_BOUND: f64 = 1e-3;
/// Ramp protocol used when the configuration has no `[time]` table.
pub const DEFAULT_RAMP: (f64, f64, usize) = (5.0, 0.02, 5);
const MANIFEST: &str = "manifest.json";

/// Maps `f` over `items` on up to `threads` scoped threads. Results keep
/// the input order whatever the completion order.
pub fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::solver("worker thread panicked"))??);
        }
        Ok(out)
    })
}

/// Flux traces recorded for one probe protocol.
#[derive(Clone, Debug)]
pub struct Measurements {
    pub map: MapKind,
    pub domain: DomainSpec,
    /// Boundary voltage expressions (Σ mode).
    pub probes: Vec<String>,
    /// Power density expressions (Ξ mode).
    pub powers: Vec<String>,
    /// Ramp traces q_i for every probe (Σ mode).
    pub ramp_diag: Vec<FluxTrace>,
    /// Ramp traces for h_i ± h_j, i < j (Σ mode).
    pub ramp_pairs: Vec<((usize, usize), FluxTrace, FluxTrace)>,
    /// Impulse traces: polarized probe pairs (i, j), i ≤ j, or single powers (i, i).
    pub impulse: Vec<((usize, usize), FluxTrace)>,
    pub config_digest: String,
    pub noise: f64,
}

fn add_noise(trace: &mut FluxTrace, level: f64, seed: u64, channel: u64) {
    if level <= 0.0 {
        return;
    }
    let scale = trace.values.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ channel.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for v in trace.values.iter_mut().flatten() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += level * scale * z;
    }
}

fn combine(a: &BoundaryTrace, b: &BoundaryTrace, s: f64) -> BoundaryTrace {
    BoundaryTrace::new(a.values.iter().zip(&b.values).map(|(x, y)| x + s * y).collect())
}

/// Runs the probe protocol of `cfg.measure` against the configured truth.
pub fn acquire(cfg: &ExperimentConfig, threads: usize) -> Result<Measurements> {
    let spec = cfg.measure.as_ref().ok_or_else(|| Error::Config {
        line: 0,
        column: 0,
        message: "missing [measure] table".into(),
    })?;
    let mesh = Arc::new(cfg.domain.build()?);
    let coeffs = cfg.require_coefficients()?.sample(&mesh)?;
    let model = ForwardModel::new(mesh.clone(), &coeffs.gamma, &coeffs.kappa, &coeffs.tensor)?.with_mode_count(cfg.solver.modes);
    let impulse_grid = TimeGrid::new(spec.impulse_t_end, spec.impulse_dt);
    impulse_grid.validate()?;
    model.spectral()?;
    let mut channel = 0u64;
    let mut out = Measurements {
        map: spec.map,
        domain: cfg.domain.clone(),
        probes: spec.probes.iter().map(|e| e.expr.source().to_string()).collect(),
        powers: spec.powers.iter().map(|e| e.expr.source().to_string()).collect(),
        ramp_diag: Vec::new(),
        ramp_pairs: Vec::new(),
        impulse: Vec::new(),
        config_digest: cfg.digest.clone(),
        noise: spec.noise,
    };
    match spec.map {
        MapKind::Sigma => {
            if spec.probes.is_empty() {
                return Err(Error::invalid("Σ measurements need at least one probe"));
            }
            let hs: Vec<BoundaryTrace> = spec.probes.iter().map(|e| BoundaryTrace::from_fn(&mesh, |p| e.expr.eval(p))).collect();
            let ramp = cfg.time.unwrap_or_else(|| {
                let (t, dt, s) = DEFAULT_RAMP;
                TimeGrid::new(t, dt).with_stride(s)
            });
            ramp.validate()?;
            let np = hs.len();
            let mut jobs: Vec<BoundaryTrace> = hs.clone();
            let pairs: Vec<(usize, usize)> = (0..np).flat_map(|i| (i + 1..np).map(move |j| (i, j))).collect();
            for &(i, j) in &pairs {
                jobs.push(combine(&hs[i], &hs[j], 1.0));
                jobs.push(combine(&hs[i], &hs[j], -1.0));
            }
            let mut traces = par_map(threads, &jobs, |h| model.sigma(h, &Envelope::Ramp, ramp))?;
            for t in traces.iter_mut() {
                add_noise(t, spec.noise, cfg.seed, channel);
                channel += 1;
            }
            let mut it = traces.into_iter();
            out.ramp_diag = it.by_ref().take(np).collect();
            for &(i, j) in &pairs {
                let plus = it.next().expect("trace count");
                let minus = it.next().expect("trace count");
                out.ramp_pairs.push(((i, j), plus, minus));
            }
            let k = spec.impulse_probes.min(np);
            let ipairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
            let traces = par_map(threads, &ipairs, |&(i, j)| model.sigma_polarized(&hs[i], &hs[j], &Envelope::Impulse, impulse_grid))?;
            for (pair, mut t) in ipairs.into_iter().zip(traces) {
                add_noise(&mut t, spec.noise, cfg.seed, channel);
                channel += 1;
                out.impulse.push((pair, t));
            }
        }
        MapKind::Xi => {
            if spec.powers.is_empty() {
                return Err(Error::invalid("Ξ measurements need at least one power density"));
            }
            let fs: Vec<ScalarField> = spec.powers.iter().map(|e| e.sample(&mesh)).collect();
            let idx: Vec<usize> = (0..fs.len()).collect();
            let traces = par_map(threads, &idx, |&i| model.xi(&fs[i], &Envelope::Impulse, impulse_grid))?;
            for (i, mut t) in traces.into_iter().enumerate() {
                add_noise(&mut t, spec.noise, cfg.seed, channel);
                channel += 1;
                out.impulse.push(((i, i), t));
            }
        }
    }
    Ok(out)
}

fn flatten(trace: &FluxTrace) -> Vec<f64> {
    trace.values.iter().flatten().copied().collect()
}

impl Measurements {
    fn files(&self) -> Vec<(String, &FluxTrace)> {
        let mut f = Vec::new();
        for (i, t) in self.ramp_diag.iter().enumerate() {
            f.push((format!("ramp/q_{i}.bin"), t));
        }
        for ((i, j), p, m) in &self.ramp_pairs {
            f.push((format!("ramp/plus_{i}_{j}.bin"), p));
            f.push((format!("ramp/minus_{i}_{j}.bin"), m));
        }
        for ((i, j), t) in &self.impulse {
            f.push((format!("impulse/s_{i}_{j}.bin"), t));
        }
        f
    }

    fn manifest(&self, mesh: &Mesh) -> Value {
        let points: Vec<Vec<f64>> = mesh.boundary_nodes.iter().map(|&b| mesh.point(b).to_vec()).collect();
        json!({
            "format": 1,
            "map": match self.map { MapKind::Sigma => "sigma", MapKind::Xi => "xi" },
            "domain": self.domain.to_json(),
            "probes": self.probes,
            "powers": self.powers,
            "ramp": {
                "times": self.ramp_diag.first().map(|t| t.times.clone()),
                "pairs": self.ramp_pairs.iter().map(|(p, _, _)| [p.0, p.1]).collect::<Vec<_>>(),
            },
            "impulse": {
                "times": self.impulse.first().map(|(_, t)| t.times.clone()),
                "channels": self.impulse.iter().map(|(p, _)| [p.0, p.1]).collect::<Vec<_>>(),
            },
            "boundary_points": points,
            "config_digest": self.config_digest,
            "noise": self.noise,
            "files": self.files().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        })
    }

    /// Writes the manifest and trace files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mesh = self.domain.build()?;
        write_json(&dir.join(MANIFEST), &self.manifest(&mesh))?;
        for (name, t) in self.files() {
            write_f64(&dir.join(name), &flatten(t))?;
        }
        Ok(())
    }

    /// Reads a directory written by `save`. Returns the measurements and the
    /// SHA-256 digest of the manifest and every trace file.
    pub fn load(dir: &Path) -> Result<(Measurements, String)> {
        let manifest_path = dir.join(MANIFEST);
        let bad = |what: &str| Error::invalid(format!("{}: {what}", manifest_path.display()));
        let mut hasher = Sha256::new();
        hasher.update(std::fs::read(&manifest_path)?);
        let v = read_json(&manifest_path)?;
        let domain = DomainSpec::from_json(v.get("domain").ok_or_else(|| bad("missing domain"))?)?;
        let mesh = domain.build()?;
        let points = v.get("boundary_points").and_then(|p| p.as_array()).ok_or_else(|| bad("missing boundary points"))?;
        if points.len() != mesh.boundary_nodes.len() {
            return Err(bad("boundary node count does not match the domain"));
        }
        for (p, &b) in points.iter().zip(&mesh.boundary_nodes) {
            let q = mesh.point(b);
            let ok = p.as_array().is_some_and(|c| c.len() == q.len() && c.iter().zip(q).all(|(a, b)| a.as_f64().is_some_and(|a| (a - b).abs() <= 1e-9)));
            if !ok {
                return Err(bad("boundary coordinates do not match the domain"));
            }
        }
        let strings = |k: &str| -> Vec<String> {
            v.get(k).and_then(|a| a.as_array()).map_or_else(Vec::new, |a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        };
        let floats = |a: Option<&Value>| -> Option<Vec<f64>> { a?.as_array()?.iter().map(|x| x.as_f64()).collect() };
        let index_pairs = |a: Option<&Value>| -> Result<Vec<(usize, usize)>> {
            let arr = a.and_then(|x| x.as_array()).ok_or_else(|| bad("missing channel list"))?;
            arr.iter()
                .map(|p| {
                    let p = p.as_array().filter(|p| p.len() == 2).ok_or_else(|| bad("malformed channel"))?;
                    let g = |k: usize| p[k].as_u64().map(|x| x as usize).ok_or_else(|| bad("malformed channel"));
                    Ok((g(0)?, g(1)?))
                })
                .collect()
        };
        let nodes = mesh.boundary_nodes.clone();
        let weights = boundary_lumped_mass(&mesh);
        let nb = nodes.len();
        let mut read = |name: &str, times: &[f64], source: &str| -> Result<FluxTrace> {
            let path = dir.join(name);
            let bytes = std::fs::read(&path)?;
            hasher.update(&bytes);
            let data = read_f64(&path)?;
            if data.len() != times.len() * nb {
                return Err(Error::invalid(format!("{} holds {} values, expected {}", path.display(), data.len(), times.len() * nb)));
            }
            Ok(FluxTrace {
                times: times.to_vec(),
                values: data.chunks(nb).map(|c| c.to_vec()).collect(),
                nodes: nodes.clone(),
                weights: weights.clone(),
                source: source.into(),
            })
        };
        let map = match v.get("map").and_then(|m| m.as_str()) {
            Some("sigma") => MapKind::Sigma,
            Some("xi") => MapKind::Xi,
            _ => return Err(bad("unknown map kind")),
        };
        let probes = strings("probes");
        let powers = strings("powers");
        let ramp = v.get("ramp").ok_or_else(|| bad("missing ramp"))?;
        let mut ramp_diag = Vec::new();
        let mut ramp_pairs = Vec::new();
        if let Some(times) = floats(ramp.get("times")) {
            for i in 0..probes.len() {
                ramp_diag.push(read(&format!("ramp/q_{i}.bin"), &times, "ramp")?);
            }
            for (i, j) in index_pairs(ramp.get("pairs"))? {
                let p = read(&format!("ramp/plus_{i}_{j}.bin"), &times, "ramp")?;
                let m = read(&format!("ramp/minus_{i}_{j}.bin"), &times, "ramp")?;
                ramp_pairs.push(((i, j), p, m));
            }
        }
        let imp = v.get("impulse").ok_or_else(|| bad("missing impulse"))?;
        let mut impulse = Vec::new();
        if let Some(times) = floats(imp.get("times")) {
            for (i, j) in index_pairs(imp.get("channels"))? {
                impulse.push(((i, j), read(&format!("impulse/s_{i}_{j}.bin"), &times, "impulse")?));
            }
        }
        let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok((
            Measurements {
                map,
                domain,
                probes,
                powers,
                ramp_diag,
                ramp_pairs,
                impulse,
                config_digest: v.get("config_digest").and_then(|s| s.as_str()).unwrap_or_default().to_string(),
                noise: v.get("noise").and_then(|x| x.as_f64()).unwrap_or(0.0),
            },
            digest,
        ))
    }
}

/// Writes the true coefficients next to (never inside) a measurement
/// directory, for later scoring.
pub fn write_truth(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mesh = cfg.domain.build()?;
    let c = cfg.require_coefficients()?.sample(&mesh)?;
    write_f64(&dir.join("gamma.bin"), &c.gamma.values)?;
    write_f64(&dir.join("kappa.bin"), &c.kappa.values)?;
    write_json(
        &dir.join("truth.json"),
        &json!({
            "domain": cfg.domain.to_json(),
            "config_digest": cfg.digest,
            "gamma_path": "gamma.bin",
            "kappa_path": "kappa.bin",
        }),
    )
}

/// Per-cluster comparison of the measured kernel with the fitted model.
#[derive(Clone, Debug)]
pub struct ClusterConsistency {
    pub exponent: f64,
    pub model_eigenvalue: f64,
    pub multiplicity: usize,
    /// ‖K_meas − K_model‖_F / ‖K_model‖_F of the amplitude kernels.
    pub kernel_mismatch: f64,
    /// σ_min of the measured cluster traces (weighted).
    pub trace_sigma_min: f64,
    /// Eigenspace matching diagnostics, or the reason it was rejected.
    pub matching: std::result::Result<Value, String>,
}

impl ClusterConsistency {
    pub fn to_json(&self) -> Value {
        json!({
            "exponent": self.exponent,
            "model_eigenvalue": self.model_eigenvalue,
            "multiplicity": self.multiplicity,
            "kernel_mismatch": self.kernel_mismatch,
            "trace_sigma_min": self.trace_sigma_min,
            "matching": match &self.matching { Ok(v) => v.clone(), Err(e) => json!({"error": e}) },
        })
    }
}

/// Everything `reconstruct` produced.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub mesh: Arc<Mesh>,
    pub dtn: Option<DtnForm>,
    pub gamma: Option<GammaFit>,
    pub series: DirichletSeriesFit,
    pub kappa_fit: KappaFit,
    pub kappa: KappaEstimate,
    pub consistency: Vec<ClusterConsistency>,
    pub model_flux_independence: f64,
    pub report: Value,
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Solver(m) => Error::Solver(format!("[{stage}] {m}")),
        Error::InvalidInput(m) => Error::InvalidInput(format!("[{stage}] {m}")),
        other => other,
    })
}

fn checkpoint(out: Option<&Path>, name: &str, v: &Value) -> Result<()> {
    log::info!("stage {name} done");
    match out {
        Some(dir) => write_json(&dir.join("checkpoints").join(format!("{name}.json")), v),
        None => Ok(()),
    }
}

fn exprs(list: &[String]) -> Result<Vec<SourcedExpr>> {
    list.iter().map(|s| SourcedExpr::inline(s)).collect()
}

/// Balanced rank-m factors (m × rows, m × cols) of a kernel matrix.
fn balanced_factors(k: &DMatrix<f64>, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let svd = k.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let m = m.min(order.len());
    let left = DMatrix::from_fn(m, k.nrows(), |r, c| u[(c, order[r])] * svd.singular_values[order[r]].sqrt());
    let right = DMatrix::from_fn(m, k.ncols(), |r, c| vt[(order[r], c)] * svd.singular_values[order[r]].sqrt());
    (left, right)
}

fn cluster_consistency(
    cluster: &SeriesCluster,
    range: std::ops::Range<usize>,
    spec: &SpectralData,
    model_d: &[Vec<f64>],
    model_fluxes: &[BoundaryTrace],
    weights: &[f64],
) -> Result<ClusterConsistency> {
    let npairs = model_d.first().map_or(0, |d| d.len());
    let nb = weights.len();
    let meas = DMatrix::from_fn(npairs, nb, |p, y| {
        cluster.traces.iter().zip(&cluster.coefficients).map(|(g, d)| d[p] * g.values[y]).sum::<f64>()
    });
    let model = DMatrix::from_fn(npairs, nb, |p, y| range.clone().map(|k| model_d[k][p] * model_fluxes[k].values[y]).sum::<f64>());
    let mismatch = (&meas - &model).norm() / model.norm().max(f64::MIN_POSITIVE);
    let m = range.len();
    let (f, ft) = balanced_factors(&model, m);
    let (g, gt) = balanced_factors(&meas, m);
    let matching = match_eigenspaces(&f, &ft, &g, &gt, m).map(|r| r.to_json()).map_err(|e| e.to_string());
    Ok(ClusterConsistency {
        exponent: cluster.exponent,
        model_eigenvalue: spec.eigenvalues[range.clone()].iter().sum::<f64>() / m as f64,
        multiplicity: m,
        kernel_mismatch: mismatch,
        trace_sigma_min: traces_sigma_min(&cluster.traces, weights).unwrap_or(0.0),
        matching,
    })
}

/// Identification from measurements alone: DtN form and γ (Σ mode), the
/// Dirichlet series of the impulse traces, a κ fit to the recovered
/// eigenvalues, the model-versus-measurement kernel check and the κ
/// Fourier series. Writes checkpoints, the report and κ̂ when `out` is set.
pub fn reconstruct(meas: &Measurements, inputs_digest: &str, spec: &ReconstructSpec, out: Option<&Path>) -> Result<Reconstruction> {
    let meas_mesh = Arc::new(meas.domain.build()?);
    let dim = meas.domain.dim();
    if spec.divisions.len() != dim && !matches!(meas.domain, DomainSpec::Disk { .. }) {
        return Err(Error::invalid(format!("reconstruction divisions need {dim} entries")));
    }
    let mesh = Arc::new(meas.domain.with_divisions(&spec.divisions).build()?);
    let tensor = staged("setup", sample_tensor(&mesh, &spec.tensor, FIT_LOWER_BOUND))?;
    let probes = exprs(&meas.probes)?;
    let powers = exprs(&meas.powers)?;
    let sample = |list: &[SourcedExpr]| -> Vec<ScalarField> { list.iter().map(|e| e.sample(&mesh)).collect() };

    let (dtn, gamma) = if meas.map == MapKind::Sigma {
        let diag: Vec<f64> = meas
            .ramp_diag
            .iter()
            .map(|t| equilibrium_value(t).map(|e| e.value))
            .collect::<Result<_>>()?;
        let mut worst: f64 = 0.0;
        let mut pairs = Vec::with_capacity(meas.ramp_pairs.len());
        for ((i, j), p, m) in &meas.ramp_pairs {
            let (ep, em) = (equilibrium_value(p)?, equilibrium_value(m)?);
            worst = worst.max(ep.relative_change).max(em.relative_change);
            pairs.push(((*i, *j), ep.value, em.value));
        }
        let mut form = staged("dtn_form", DtnForm::from_values(&diag, &pairs))?;
        form.max_relative_change = worst;
        checkpoint(out, "dtn_form", &form.to_json())?;
        let hs: Vec<BoundaryTrace> = probes.iter().map(|e| BoundaryTrace::from_fn(&mesh, |p| e.expr.eval(p))).collect();
        let basis = sample(&spec.gamma_basis);
        let fit = staged(
            "gamma_fit",
            fit_gamma_from_dtn(mesh.clone(), &hs, &form.gram, &basis, &spec.gamma_initial, spec.tikhonov, FIT_LOWER_BOUND),
        )?;
        checkpoint(out, "gamma_fit", &fit.to_json())?;
        (Some(form), Some(fit))
    } else {
        (None, None)
    };

    let traces: Vec<FluxTrace> = meas.impulse.iter().map(|(_, t)| t.clone()).collect();
    let series = staged("series", fit_dirichlet_series(&traces, spec.mode_budget, spec.window))?;
    let mut series_json = series.to_json();
    series_json["flux_traces"] = json!(series.clusters.iter().map(|c| c.traces.iter().map(|t| t.values.clone()).collect::<Vec<_>>()).collect::<Vec<_>>());
    checkpoint(out, "series", &series_json)?;
    let used: Vec<&SeriesCluster> = series.observable().into_iter().take(spec.clusters).collect();
    if used.is_empty() {
        return Err(Error::identification("series", "no observable exponent clusters"));
    }
    let targets: Vec<(f64, usize)> = used.iter().map(|c| (c.exponent, c.multiplicity)).collect();

    let kbasis = sample(&spec.kappa_basis);
    if kbasis[0].min() <= 0.0 {
        return Err(Error::invalid("the first κ basis function must be positive"));
    }
    let mut theta0 = vec![0.0; kbasis.len()];
    theta0[0] = 1.0;
    let reference = staged("kappa_fit", assemble_p(mesh.clone(), &kbasis[0], &tensor).and_then(|p| p.spectrum(1, 1e-6, 0x5eed)))?;
    theta0[0] = targets[0].0 / reference.eigenvalues[0];
    let kfit = staged("kappa_fit", fit_kappa_spectrum(mesh.clone(), &tensor, &kbasis, &targets, &theta0, spec.tikhonov, FIT_LOWER_BOUND))?;
    checkpoint(out, "kappa_fit", &kfit.to_json())?;

    let p_hat = staged("consistency", assemble_p(mesh.clone(), &kfit.field, &tensor))?;
    let total: usize = targets.iter().map(|t| t.1).sum();
    let modes = spec.kappa_modes.max(total + 1).min(mesh.interior_node_count);
    let spec_hat = staged("consistency", p_hat.spectrum(modes, 1e-6, 0x5eed))?;
    if spec_hat.len() < total {
        return Err(Error::identification("consistency", "model spectrum has fewer eigenpairs than the measured clusters"));
    }
    let loads: Vec<Vec<f64>> = match (&gamma, meas.map) {
        (Some(g), MapKind::Sigma) => {
            let cond = Conductivity::new(mesh.clone(), g.field.clone())?;
            let w: Vec<ScalarField> = probes
                .iter()
                .map(|e| cond.solve(&BoundaryTrace::from_fn(&mesh, |p| e.expr.eval(p))))
                .collect::<Result<_>>()?;
            meas.impulse
                .iter()
                .map(|((i, j), _)| joule_bilinear(&mesh, &g.field, &w[*i], &w[*j]).map(|f| p_hat.power_load(&f)))
                .collect::<Result<_>>()?
        }
        _ => {
            let fs = sample(&powers);
            meas.impulse.iter().map(|((i, _), _)| p_hat.power_load(&fs[*i])).collect()
        }
    };
    let model_d: Vec<Vec<f64>> = spec_hat.eigenfunctions[..total]
        .iter()
        .map(|phi| loads.iter().map(|l| linalg::dot(&phi.values, l)).collect())
        .collect();
    let model_fluxes: Vec<BoundaryTrace> = spec_hat.flux_traces[..total]
        .iter()
        .map(|f| resample_boundary(&mesh, f, &meas_mesh))
        .collect::<Result<_>>()?;
    let weights = boundary_lumped_mass(&meas_mesh);
    let mut consistency = Vec::with_capacity(used.len());
    let mut start = 0;
    for c in &used {
        let range = start..start + c.multiplicity;
        start += c.multiplicity;
        consistency.push(cluster_consistency(c, range, &spec_hat, &model_d, &model_fluxes, &weights)?);
    }
    let independence = flux_independence_check(&spec_hat, &boundary_lumped_mass(&mesh), 10.min(spec_hat.len())).unwrap_or(0.0);
    checkpoint(
        out,
        "consistency",
        &json!({
            "clusters": consistency.iter().map(|c| c.to_json()).collect::<Vec<_>>(),
            "model_flux_independence": independence,
        }),
    )?;

    let kappa = staged("kappa", recover_kappa(&mesh, &spec_hat, Some(spec.kappa_modes), SeriesFilter::Riesz))?;
    let kappa_path = PathBuf::from("kappa.bin");
    if let Some(dir) = out {
        write_f64(&dir.join(&kappa_path), &kappa.field.values)?;
        write_f64(&dir.join("kappa_model.bin"), &kfit.field.values)?;
        if let Some(g) = &gamma {
            write_f64(&dir.join("gamma.bin"), &g.field.values)?;
        }
    }
    let report = json!({
        "stage": "complete",
        "inputs_digest": inputs_digest,
        "config_digest": meas.config_digest,
        "map": match meas.map { MapKind::Sigma => "sigma", MapKind::Xi => "xi" },
        "mesh": {"domain": meas.domain.with_divisions(&spec.divisions).to_json(), "nodes": mesh.node_count()},
        "eigenvalues": used.iter().map(|c| c.exponent).collect::<Vec<_>>(),
        "multiplicities": used.iter().map(|c| c.multiplicity).collect::<Vec<_>>(),
        "all_exponents": series.exponents(),
        "residuals": {
            "dtn_equilibrium": dtn.as_ref().map(|d| d.max_relative_change),
            "gamma_misfit": gamma.as_ref().map(|g| g.misfit),
            "series": series.residual,
            "kappa_eigenvalue_misfit": kfit.misfit,
            "kappa_parseval_defect": kappa.parseval_defect,
            "kernel_mismatch": consistency.iter().map(|c| c.kernel_mismatch).collect::<Vec<_>>(),
        },
        "kappa_field_path": kappa_path,
        "kappa_params": kfit.params,
        "kappa_modes_used": kappa.modes_used,
        "kappa_warning": kappa.warning,
        "gamma_params": gamma.as_ref().map(|g| g.params.clone()),
        "dtn_gram": dtn.as_ref().map(|d| d.gram.clone()),
        "model_flux_independence": independence,
    });
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(Reconstruction {
        mesh,
        dtn,
        gamma,
        series,
        kappa_fit: kfit,
        kappa,
        consistency,
        model_flux_independence: independence,
        report,
    })
}
