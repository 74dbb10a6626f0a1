//! Low-dimensional least-squares fit of γ to a measured DtN form table.
//!
//! γ(θ) = Σ θ_l b_l. The model form is G_ij(θ) = w_iᵀ K(θ) w_j with w_i the
//! discrete conductivity solution for probe h_i, and since w_i minimizes the
//! energy for its boundary data, ∂G_ij/∂θ_l = w_iᵀ K(b_l) w_j.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::elliptic::Conductivity;
use crate::error::{Error, Result};
use crate::fem;
use crate::linalg::Csr;
use crate::mesh::{BoundaryTrace, Mesh, ScalarField};

/// Outcome of the γ fit.
#[derive(Clone, Debug)]
pub struct GammaFit {
    pub params: Vec<f64>,
    pub field: ScalarField,
    /// ‖G(θ) − G_meas‖ / ‖G_meas‖ over the upper triangle.
    pub misfit: f64,
    pub iterations: usize,
    /// Misfit after every accepted iterate, starting with the initial one.
    pub history: Vec<f64>,
}

impl GammaFit {
    pub fn to_json(&self) -> Value {
        json!({
            "params": self.params,
            "misfit": self.misfit,
            "iterations": self.iterations,
            "history": self.history,
        })
    }
}

fn field_of(basis: &[ScalarField], theta: &[f64]) -> ScalarField {
    let n = basis[0].len();
    let mut v = vec![0.0; n];
    for (b, &t) in basis.iter().zip(theta) {
        for (x, y) in v.iter_mut().zip(&b.values) {
            *x += t * y;
        }
    }
    ScalarField::new(v)
}

fn quad(k: &Csr, a: &[f64], b: &[f64]) -> f64 {
    crate::linalg::dot(a, &k.mul(b))
}

struct Model {
    residual: Vec<f64>,
    jacobian: DMatrix<f64>,
}

/// Gauss–Newton with Levenberg damping and Tikhonov regularization
/// α‖θ − θ₀‖² toward the initial guess. Iterates keep γ ≥ `lower_bound`.
pub fn fit_gamma_from_dtn(
    mesh: Arc<Mesh>,
    probes: &[BoundaryTrace],
    gram: &[Vec<f64>],
    basis: &[ScalarField],
    initial: &[f64],
    tikhonov: f64,
    lower_bound: f64,
) -> Result<GammaFit> {
    let np = probes.len();
    let nl = basis.len();
    if nl == 0 || initial.len() != nl {
        return Err(Error::invalid("γ basis and initial parameters must have equal nonzero length"));
    }
    if gram.len() != np || gram.iter().any(|r| r.len() != np) {
        return Err(Error::invalid("form table size does not match the probe count"));
    }
    let pairs: Vec<(usize, usize)> = (0..np).flat_map(|i| (i..np).map(move |j| (i, j))).collect();
    if nl > pairs.len() {
        return Err(Error::invalid(format!("{nl} parameters exceed {} probe pairs", pairs.len())));
    }
    for b in basis {
        b.check_mesh(&mesh)?;
    }
    let stiff: Vec<Csr> = basis.iter().map(|b| fem::stiffness(&mesh, Some(&b.values), None)).collect();
    let meas: Vec<f64> = pairs.iter().map(|&(i, j)| gram[i][j]).collect();
    let scale = meas.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let evaluate = |theta: &[f64]| -> Result<Model> {
        let gamma = field_of(basis, theta);
        let cond = Conductivity::new(mesh.clone(), gamma)?;
        let w: Vec<Vec<f64>> = probes.iter().map(|h| cond.solve(h).map(|f| f.values)).collect::<Result<_>>()?;
        let mut residual = Vec::with_capacity(pairs.len());
        let mut jacobian = DMatrix::zeros(pairs.len(), nl);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            let mut g = 0.0;
            for l in 0..nl {
                let d = quad(&stiff[l], &w[i], &w[j]);
                jacobian[(r, l)] = d / scale;
                g += theta[l] * d;
            }
            residual.push((g - meas[r]) / scale);
        }
        Ok(Model { residual, jacobian })
    };
    let admissible = |theta: &[f64]| field_of(basis, theta).values.iter().all(|&v| v >= lower_bound);
    if !admissible(initial) {
        return Err(Error::invalid("initial γ parameters violate the lower bound"));
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let objective = |m: &Model, theta: &[f64]| {
        let reg: f64 = theta.iter().zip(initial).map(|(a, b)| (a - b).powi(2)).sum();
        m.residual.iter().map(|v| v * v).sum::<f64>() + tikhonov * reg
    };
    let mut theta = initial.to_vec();
    let mut model = evaluate(&theta)?;
    let mut history = vec![norm(&model.residual)];
    let mut iterations = 0;
    let mut mu = 1e-6;
    const MAX_ITER: usize = 50;
    while iterations < MAX_ITER && norm(&model.residual) > 1e-12 {
        let j = &model.jacobian;
        let r = DVector::from_vec(model.residual.clone());
        let d0 = DVector::from_iterator(nl, theta.iter().zip(initial).map(|(a, b)| a - b));
        let jtj = j.transpose() * j;
        let grad = j.transpose() * &r + &d0 * tikhonov;
        let f0 = objective(&model, &theta);
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = &jtj + DMatrix::identity(nl, nl) * tikhonov;
            for d in 0..nl {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.clone().cholesky().map(|c| c.solve(&(-&grad))) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            if admissible(&cand) {
                let m = evaluate(&cand)?;
                if objective(&m, &cand) < f0 {
                    let small = step.norm() <= 1e-12 * (1.0 + theta.iter().map(|v| v * v).sum::<f64>().sqrt());
                    theta = cand;
                    model = m;
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    iterations += 1;
                    history.push(norm(&model.residual));
                    if small {
                        return finish(basis, theta, model, iterations, history, &norm);
                    }
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    let misfit = norm(&model.residual);
    if !misfit.is_finite() {
        return Err(Error::identification("gamma_fit", format!("non-finite misfit after {iterations} iterations: {history:?}")));
    }
    finish(basis, theta, model, iterations, history, &norm)
}

fn finish(basis: &[ScalarField], theta: Vec<f64>, model: Model, iterations: usize, history: Vec<f64>, norm: &dyn Fn(&[f64]) -> f64) -> Result<GammaFit> {
    Ok(GammaFit {
        field: field_of(basis, &theta),
        misfit: norm(&model.residual),
        params: theta,
        iterations,
        history,
    })
}

/// q(h_i, h_j) = w_iᵀ K w_j for a known γ: the exact discrete form table.
pub fn model_gram(mesh: Arc<Mesh>, gamma: &ScalarField, probes: &[BoundaryTrace]) -> Result<Vec<Vec<f64>>> {
    let cond = Conductivity::new(mesh, gamma.clone())?;
    let w: Vec<Vec<f64>> = probes.iter().map(|h| cond.solve(h).map(|f| f.values)).collect::<Result<_>>()?;
    Ok((0..w.len()).map(|i| (0..w.len()).map(|j| quad(&cond.k, &w[i], &w[j])).collect()).collect())
}
