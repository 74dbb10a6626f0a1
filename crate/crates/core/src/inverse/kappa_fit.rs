//! Low-dimensional fit of κ to recovered Dirichlet eigenvalue clusters.
//!
//! κ(θ) = Σ θ_l b_l. For the pencil K φ = λ M_{1/κ} φ with M_{1/κ}-normalized
//! φ, ∂λ/∂θ_l = λ φᵀ M(b_l/κ²) φ. Residuals compare cluster means, which are
//! smooth in θ even where the model splits a measured cluster.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::elliptic::assemble_p;
use crate::error::{Error, Result};
use crate::fem;
use crate::linalg;
use crate::mesh::{Mesh, ScalarField, TensorField};

/// Outcome of the κ eigenvalue fit.
#[derive(Clone, Debug)]
pub struct KappaFit {
    pub params: Vec<f64>,
    pub field: ScalarField,
    /// Relative cluster-mean misfit, multiplicity weighted.
    pub misfit: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
    /// Model cluster means at the final parameters.
    pub model_clusters: Vec<f64>,
}

impl KappaFit {
    pub fn to_json(&self) -> Value {
        json!({
            "params": self.params,
            "misfit": self.misfit,
            "iterations": self.iterations,
            "history": self.history,
            "model_clusters": self.model_clusters,
        })
    }
}

fn field_of(basis: &[ScalarField], theta: &[f64]) -> ScalarField {
    let mut v = vec![0.0; basis[0].len()];
    for (b, &t) in basis.iter().zip(theta) {
        linalg::axpy(t, &b.values, &mut v);
    }
    ScalarField::new(v)
}

struct Model {
    residual: Vec<f64>,
    jacobian: DMatrix<f64>,
    means: Vec<f64>,
}

/// Fits θ so that the lowest model eigenvalues, grouped by the measured
/// multiplicities, match the measured cluster exponents. Gauss–Newton with
/// Levenberg damping and Tikhonov pull toward `initial`; κ stays above
/// `lower_bound`.
pub fn fit_kappa_spectrum(
    mesh: Arc<Mesh>,
    tensor: &TensorField,
    basis: &[ScalarField],
    clusters: &[(f64, usize)],
    initial: &[f64],
    tikhonov: f64,
    lower_bound: f64,
) -> Result<KappaFit> {
    let nl = basis.len();
    if nl == 0 || initial.len() != nl {
        return Err(Error::invalid("κ basis and initial parameters must have equal nonzero length"));
    }
    if clusters.is_empty() || clusters.iter().any(|&(l, m)| !(l > 0.0) || m == 0) {
        return Err(Error::invalid("κ fit needs positive cluster exponents with nonzero multiplicity"));
    }
    for b in basis {
        b.check_mesh(&mesh)?;
    }
    let total: usize = clusters.iter().map(|c| c.1).sum();
    let n = mesh.interior_node_count;
    if total + 1 > n {
        return Err(Error::invalid("reconstruction mesh has too few interior nodes"));
    }
    let ii = mesh.interior_nodes().to_vec();
    let evaluate = |theta: &[f64]| -> Result<Model> {
        let kappa = field_of(basis, theta);
        let p = assemble_p(mesh.clone(), &kappa, tensor)?;
        let want = (total + 4).min(n);
        let pairs = linalg::generalized_lowest(p.k_ii(), p.mk_ii(), p.k_factor(), want, 0x5eed)?;
        let mut residual = Vec::with_capacity(clusters.len());
        let mut jacobian = DMatrix::zeros(clusters.len(), nl);
        let mut means = Vec::with_capacity(clusters.len());
        let weighted: Vec<_> = basis
            .iter()
            .map(|b| {
                let w: Vec<f64> = b.values.iter().zip(&kappa.values).map(|(bv, k)| bv / (k * k)).collect();
                fem::mass(&mesh, Some(&w)).select(&ii, &ii)
            })
            .collect();
        let mut start = 0;
        for (c, &(target, m)) in clusters.iter().enumerate() {
            let idx = start..start + m;
            start += m;
            let mean = pairs.values[idx.clone()].iter().sum::<f64>() / m as f64;
            let w = (m as f64).sqrt() / target;
            residual.push(w * (mean - target));
            means.push(mean);
            for (l, mw) in weighted.iter().enumerate() {
                let d: f64 = idx
                    .clone()
                    .map(|k| pairs.values[k] * linalg::dot(&pairs.vectors[k], &mw.mul(&pairs.vectors[k])))
                    .sum::<f64>()
                    / m as f64;
                jacobian[(c, l)] = w * d;
            }
        }
        Ok(Model { residual, jacobian, means })
    };
    let admissible = |theta: &[f64]| field_of(basis, theta).values.iter().all(|&v| v >= lower_bound);
    if !admissible(initial) {
        return Err(Error::invalid("initial κ parameters violate the lower bound"));
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
    const MAX_ITER: usize = 40;
    while iterations < MAX_ITER && norm(&model.residual) > 1e-12 {
        let j = &model.jacobian;
        let r = DVector::from_vec(model.residual.clone());
        let d0 = DVector::from_iterator(nl, theta.iter().zip(initial).map(|(a, b)| a - b));
        let jtj = j.transpose() * j;
        let grad = j.transpose() * &r + &d0 * tikhonov;
        let f0 = objective(&model, &theta);
        let mut accepted = false;
        let mut small = false;
        for _ in 0..30 {
            let mut a = &jtj + DMatrix::identity(nl, nl) * tikhonov;
            for d in 0..nl {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            if admissible(&cand) {
                let m = evaluate(&cand)?;
                if objective(&m, &cand) < f0 {
                    small = step.norm() <= 1e-10 * (1.0 + norm(&theta));
                    theta = cand;
                    model = m;
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    iterations += 1;
                    history.push(norm(&model.residual));
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted || small {
            break;
        }
    }
    let misfit = norm(&model.residual);
    if !misfit.is_finite() {
        return Err(Error::identification("kappa_fit", format!("non-finite misfit after {iterations} iterations")));
    }
    Ok(KappaFit {
        field: field_of(basis, &theta),
        params: theta,
        misfit,
        iterations,
        history,
        model_clusters: model.means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    #[test]
    fn recovers_constant_scaling() {
        let mesh = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[16, 16]).unwrap());
        let tensor = TensorField::identity(&mesh);
        let two = ScalarField::constant(&mesh, 2.0);
        let p = assemble_p(mesh.clone(), &two, &tensor).unwrap();
        let spec = p.spectrum(4, 1e-6, 1).unwrap();
        let clusters: Vec<(f64, usize)> = spec
            .cluster_values()
            .into_iter()
            .zip(spec.multiplicities.clone())
            .collect();
        let basis = vec![ScalarField::constant(&mesh, 1.0)];
        let fit = fit_kappa_spectrum(mesh, &tensor, &basis, &clusters, &[1.0], 1e-10, 1e-3).unwrap();
        assert!((fit.params[0] - 2.0).abs() < 1e-6, "{:?}", fit.params);
        assert!(fit.misfit < 1e-8);
    }

    #[test]
    fn rejects_bad_targets() {
        let mesh = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[4, 4]).unwrap());
        let tensor = TensorField::identity(&mesh);
        let basis = vec![ScalarField::constant(&mesh, 1.0)];
        assert!(fit_kappa_spectrum(mesh.clone(), &tensor, &basis, &[(-1.0, 1)], &[1.0], 0.0, 1e-3).is_err());
        assert!(fit_kappa_spectrum(mesh, &tensor, &basis, &[(1.0, 100)], &[1.0], 0.0, 1e-3).is_err());
    }
}
