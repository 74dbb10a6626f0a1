//! Invariant suites run by `thermoeit verify` on the configured experiment.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::boundary::halfspace_root;
use crate::cgo::{extend_gamma, make_phase_pair, solve_remainder};
use crate::config::ExperimentConfig;
use crate::elliptic::Conductivity;
use crate::error::Result;
use crate::heat::{energy_balance, Envelope, FluxTrace, ForwardModel, SpatialSource, TimeGrid};
use crate::inverse::dtn_form::equilibrium_value;
use crate::inverse::eigenspace::{flux_independence_min, match_eigenspaces, random_rotation};
use crate::inverse::series::fit_dirichlet_series;
use crate::linalg;
use crate::mesh::{boundary_lumped_mass, BoundaryTrace};

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
            detail: detail.into(),
        }
    }

    fn at_least(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            value,
            tolerance,
            pass: value >= tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: &crate::Error) -> Check {
        Check {
            name: name.into(),
            value: f64::NAN,
            tolerance: f64::NAN,
            pass: false,
            detail: err.to_string(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "value": if self.value.is_finite() { json!(self.value) } else { Value::Null },
            "tolerance": if self.tolerance.is_finite() { json!(self.tolerance) } else { Value::Null },
            "pass": self.pass,
            "detail": self.detail,
        })
    }
}

fn guard(name: &str, f: impl FnOnce() -> Result<Check>) -> Check {
    let start = std::time::Instant::now();
    let c = f().unwrap_or_else(|e| Check::failed(name, &e));
    log::info!("{name} took {:.2?}", start.elapsed());
    c
}

/// Runs every suite. Failures of individual suites are reported, not raised.
pub fn run_suites(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    let mesh = Arc::new(cfg.domain.build()?);
    let coeffs = cfg.require_coefficients()?.sample(&mesh)?;
    let model = ForwardModel::new(mesh.clone(), &coeffs.gamma, &coeffs.kappa, &coeffs.tensor)?.with_mode_count(cfg.solver.modes.min(40));
    let p = &model.operator;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = match &cfg.source {
        Some(s) => BoundaryTrace::from_fn(&mesh, |x| s.h.expr.eval(x)),
        None => BoundaryTrace::from_fn(&mesh, |x| x[0]),
    };
    let mut out = Vec::new();

    out.push(guard("self_adjointness", || {
        let n = p.interior_dim();
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let (pu, pv) = (p.apply(&u), p.apply(&v));
        let a = p.weighted_inner(&pu, &v);
        let b = p.weighted_inner(&u, &pv);
        let scale = p.weighted_inner(&pu, &pu).sqrt() * p.weighted_inner(&v, &v).sqrt();
        Ok(Check::at_most("self_adjointness", (a - b).abs() / scale, 1e-10, "|(Pu,v)_κ − (u,Pv)_κ| / (‖Pu‖‖v‖)"))
    }));

    let ramp = TimeGrid::new(5.0, 0.02);
    out.push(guard("energy_balance", || {
        let f = model.power_density(&h, &h)?;
        let rows = energy_balance(p, &SpatialSource::Power(f), &Envelope::Ramp, ramp)?;
        let worst = rows.iter().map(|(r, e)| r / e.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        Ok(Check::at_most("energy_balance", worst, 10.0, "max residual / truncation estimate over Crank–Nicolson steps"))
    }));

    out.push(guard("equilibrium_dtn_identity", || {
        let trace = model.sigma(&h, &Envelope::Ramp, ramp.with_stride(5))?;
        let q = equilibrium_value(&trace)?.value;
        let w = model.conductivity.solve(&h)?;
        let exact = model.conductivity.energy(&w);
        Ok(Check::at_most(
            "equilibrium_dtn_identity",
            (q - exact).abs() / exact.abs().max(f64::MIN_POSITIVE),
            1e-6,
            format!("late-time −∫Σ = {q:.12e} against ⟨Λh,h⟩ = {exact:.12e}"),
        ))
    }));

    let start = std::time::Instant::now();
    let spectral = model.spectral();
    log::info!("spectral solve took {:.2?}", start.elapsed());
    match spectral {
        Ok(s) => {
            let worst = s.residuals.iter().cloned().fold(0.0, f64::max);
            out.push(Check::at_most("eigen_residuals", worst, 1e-8, format!("{} eigenpairs, clusters {:?}", s.len(), s.multiplicities)));
            out.push(guard("flux_independence", || {
                let sigma = flux_independence_min(s, &boundary_lumped_mass(&mesh), 10.min(s.len()))?;
                Ok(Check::at_least("flux_independence", sigma, 1e-3, "min σ of normalized flux traces per cluster, first 10 eigenvalues"))
            }));
        }
        Err(e) => {
            out.push(Check::failed("eigen_residuals", &e));
            out.push(Check::failed("flux_independence", &e));
        }
    }

    out.push(guard("eigenspace_rotation", || {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let f = DMatrix::from_fn(3, 20, |_, _| StandardNormal.sample(&mut rng));
            let ft = DMatrix::from_fn(3, 30, |_, _| StandardNormal.sample(&mut rng));
            let q = random_rotation(3, &mut rng);
            let m = match_eigenspaces(&f, &ft, &(q.transpose() * &f), &(q.transpose() * &ft), 3)?;
            worst = worst.max((&m.t - &q).norm()).max(m.orthogonality_defect);
        }
        Ok(Check::at_most("eigenspace_rotation", worst, 1e-8, "max ‖T − Q‖, ‖TᵀT − I‖ over 20 rotations"))
    }));

    out.push(guard("series_self_inverse", || {
        let g1 = [0.6, 0.8, 0.0];
        let g2 = [0.0, 0.6, -0.8];
        let times: Vec<f64> = (1..=200).map(|i| i as f64 * 5e-3).collect();
        let values = times
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; 3];
                linalg::axpy(2.0 * (-3.0 * t).exp(), &g1, &mut row);
                linalg::axpy((-11.0 * t).exp(), &g2, &mut row);
                row
            })
            .collect();
        let tr = FluxTrace {
            times,
            values,
            nodes: vec![0, 1, 2],
            weights: vec![1.0; 3],
            source: "synthetic".into(),
        };
        let fit = fit_dirichlet_series(&[tr], 10, [0.05, 1.0])?;
        let e = fit.exponents();
        let err = if e.len() == 2 { ((e[0] - 3.0) / 3.0).abs().max(((e[1] - 11.0) / 11.0).abs()) } else { f64::INFINITY };
        Ok(Check::at_most("series_self_inverse", err, 1e-6, format!("exponents {e:?}")))
    }));

    out.push(guard("halfspace_roots", || {
        let a = match &cfg.halfspace {
            Some(hs) => hs.tensor.clone(),
            None => vec![vec![2.0, 1.0], vec![1.0, 1.0]],
        };
        let z1 = halfspace_root(&a, &[1.0])?;
        let z3 = halfspace_root(&a, &[3.0])?;
        let poly = a[1][1] * z1 * z1 + 2.0 * a[1][0] * z1 + a[0][0];
        let err = poly.norm().max((z3 - 3.0 * z1).norm() / z3.norm());
        let pass = z1.im > 0.0;
        let mut c = Check::at_most("halfspace_roots", err, 1e-12, "root residual and homogeneity defect");
        c.pass &= pass;
        Ok(c)
    }));

    out.push(guard("cgo_constant_gamma", || {
        let ext = extend_gamma(Arc::new(|_: &[f64; 3]| 1.5), [0.0; 3], [1.0; 3], 2.0)?;
        let pair = make_phase_pair(&[1.0, 1.0, 0.0], 20.0)?;
        let sol = solve_remainder(&ext, &pair.rho1, 16, 2.0)?;
        Ok(Check::at_most("cgo_constant_gamma", sol.remainder_l2, 1e-12, "‖r_ρ‖ for γ ≡ 1.5, |ρ| = 20"))
    }));

    out.push(guard("dtn_symmetry", || {
        let cond = Conductivity::new(mesh.clone(), coeffs.gamma.clone())?;
        let h2 = BoundaryTrace::from_fn(&mesh, |x| x[1] * x[1] + x[0]);
        let w1 = cond.solve(&h)?;
        let w2 = cond.solve(&h2)?;
        let a = linalg::dot(&w1.values, &cond.k.mul(&w2.values));
        let b = linalg::dot(&w2.values, &cond.k.mul(&w1.values));
        Ok(Check::at_most("dtn_symmetry", (a - b).abs() / a.abs().max(1e-300), 1e-10, "⟨Λh₁,h₂⟩ = ⟨h₁,Λh₂⟩"))
    }));

    Ok(out)
}

/// JSON report of a suite run.
pub fn report_json(checks: &[Check], digest: &str) -> Value {
    json!({
        "config_digest": digest,
        "pass": checks.iter().all(|c| c.pass),
        "checks": checks.iter().map(|c| c.to_json()).collect::<Vec<_>>(),
    })
}
