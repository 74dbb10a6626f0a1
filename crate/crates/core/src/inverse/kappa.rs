//! κ from a weighted-orthonormal eigenbasis: κ = Σ_k c_k φ_k with
//! c_k = ∫Ω φ_k dx, since (1, φ_k)_{L²} = (κ, φ_k)_{L²_κ}.

use serde_json::{json, Value};

use crate::elliptic::SpectralData;
use crate::error::{Error, Result};
use crate::fem;
use crate::linalg;
use crate::mesh::{Mesh, ScalarField, Shape};

/// Parseval defect at which the truncation stops.
pub const PARSEVAL_TOL: f64 = 1e-3;

/// Weights applied to the truncated series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesFilter {
    /// Plain partial sum.
    None,
    /// Riesz means (1 − λ_k/λ_cut)² with λ_cut the first eigenvalue after
    /// the truncation; damps the Gibbs oscillation of the partial sum.
    Riesz,
}

#[derive(Clone, Debug)]
pub struct KappaEstimate {
    pub field: ScalarField,
    /// c_k for every available mode.
    pub coefficients: Vec<f64>,
    pub modes_used: usize,
    /// 1 − Σ_{k≤K} c_k² / ∫κ at the chosen K.
    pub parseval_defect: f64,
    pub warning: Option<String>,
}

impl KappaEstimate {
    pub fn to_json(&self) -> Value {
        json!({
            "modes_used": self.modes_used,
            "parseval_defect": self.parseval_defect,
            "warning": self.warning,
            "coefficients": self.coefficients.iter().take(self.modes_used).collect::<Vec<_>>(),
        })
    }
}

/// c_k = ∫Ω φ_k dx for every eigenfunction.
pub fn fourier_coefficients(mesh: &Mesh, spec: &SpectralData) -> Vec<f64> {
    let m = fem::mass(mesh, None);
    let m1 = m.mul(&vec![1.0; mesh.node_count()]);
    spec.eigenfunctions.iter().map(|phi| linalg::dot(&m1, &phi.values)).collect()
}

/// κ̂ = Σ_{k≤K} w_k c_k φ_k. K is the smallest cluster boundary where the
/// Parseval defect (relative to ∫κ, κ being the weight of the spectral data)
/// drops below `PARSEVAL_TOL`, capped by `max_modes` and the available modes.
pub fn recover_kappa(mesh: &Mesh, spec: &SpectralData, max_modes: Option<usize>, filter: SeriesFilter) -> Result<KappaEstimate> {
    if spec.is_empty() {
        return Err(Error::invalid("no eigenpairs"));
    }
    let c = fourier_coefficients(mesh, spec);
    let total = crate::mesh::integrate(mesh, &spec.kappa);
    let cap = max_modes.unwrap_or(spec.len()).min(spec.len());
    let ends: Vec<usize> = spec.clusters().iter().map(|r| r.end).filter(|&e| e <= cap).collect();
    let ends = if ends.is_empty() { vec![cap] } else { ends };
    let defect_at = |k: usize| 1.0 - c[..k].iter().map(|v| v * v).sum::<f64>() / total;
    let mut k = *ends.last().unwrap();
    for &e in &ends {
        if defect_at(e) <= PARSEVAL_TOL {
            k = e;
            break;
        }
    }
    let defect = defect_at(k);
    let warning = (defect > PARSEVAL_TOL).then(|| {
        // the tail of Σ c_k² decays like K^{-1/2} for a κ not vanishing on ∂Ω
        let suggested = (k as f64 * (defect / PARSEVAL_TOL).powi(2)).ceil();
        format!("Parseval defect {defect:.3e} exceeds {PARSEVAL_TOL:e} with {k} modes; about {suggested} modes would be needed")
    });
    let cut = if k < spec.len() { spec.eigenvalues[k] } else { spec.eigenvalues[k - 1] * (1.0 + 1e-3) };
    let mut v = vec![0.0; mesh.node_count()];
    for i in 0..k {
        let w = match filter {
            SeriesFilter::None => 1.0,
            SeriesFilter::Riesz => (1.0 - spec.eigenvalues[i] / cut).max(0.0).powi(2),
        };
        linalg::axpy(w * c[i], &spec.eigenfunctions[i].values, &mut v);
    }
    Ok(KappaEstimate {
        field: ScalarField::new(v),
        coefficients: c,
        modes_used: k,
        parseval_defect: defect,
        warning,
    })
}

/// Whether a point lies in the margin-inset subdomain.
pub fn in_bulk(mesh: &Mesh, p: &[f64], margin: f64) -> bool {
    match mesh.shape {
        Shape::Box { lengths } => (0..mesh.dim).all(|i| p[i] >= margin * lengths[i] && p[i] <= (1.0 - margin) * lengths[i]),
        Shape::Disk { radius } => (p[0] * p[0] + p[1] * p[1]).sqrt() <= radius * (1.0 - 2.0 * margin),
        _ => true,
    }
}

/// ‖est − truth‖_{L²(B)} / ‖truth‖_{L²(B)} over the elements whose centroid
/// lies in the margin-inset subdomain B.
pub fn bulk_l2_error(mesh: &Mesh, est: &ScalarField, truth: &ScalarField, margin: f64) -> Result<f64> {
    est.check_mesh(mesh)?;
    truth.check_mesh(mesh)?;
    let d = mesh.dim;
    let p1_sq = |vals: &[f64], vol: f64| {
        let s: f64 = vals.iter().sum();
        let s2: f64 = vals.iter().map(|v| v * v).sum();
        vol * (s2 + s * s) / ((d + 1) * (d + 2)) as f64
    };
    let (mut num, mut den) = (0.0, 0.0);
    for e in 0..mesh.elements.len() {
        if !in_bulk(mesh, &mesh.centroid(e), margin) {
            continue;
        }
        let el = mesh.element(e);
        let vol = mesh.geometry(e).volume;
        let diff: Vec<f64> = el.iter().map(|&n| est.values[n] - truth.values[n]).collect();
        let tv: Vec<f64> = el.iter().map(|&n| truth.values[n]).collect();
        num += p1_sq(&diff, vol);
        den += p1_sq(&tv, vol);
    }
    if den == 0.0 {
        return Err(Error::invalid("empty bulk region"));
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::assemble_p;
    use crate::mesh::{build_box_mesh, TensorField};
    use std::f64::consts::PI;

    #[test]
    fn first_coefficient_of_the_square() {
        let mesh = std::sync::Arc::new(build_box_mesh(2, &[1.0, 1.0], &[24, 24]).unwrap());
        let p = assemble_p(mesh.clone(), &ScalarField::constant(&mesh, 1.0), &TensorField::identity(&mesh)).unwrap();
        let spec = p.spectrum(4, 1e-6, 1).unwrap();
        let c = fourier_coefficients(&mesh, &spec);
        assert!((c[0] - 8.0 / (PI * PI)).abs() < 5e-3 * 8.0 / (PI * PI), "{}", c[0]);
        // c_{12} and c_{21} vanish
        assert!(c[1].abs() < 1e-8 && c[2].abs() < 1e-8);
    }

    #[test]
    fn bulk_error_of_identical_fields_is_zero() {
        let mesh = build_box_mesh(2, &[1.0, 1.0], &[8, 8]).unwrap();
        let f = ScalarField::from_fn(&mesh, |p| 1.0 + p[0]);
        assert_eq!(bulk_l2_error(&mesh, &f, &f, 0.2).unwrap(), 0.0);
        let g = ScalarField::new(f.values.iter().map(|v| 1.1 * v).collect());
        assert!((bulk_l2_error(&mesh, &g, &f, 0.2).unwrap() - 0.1).abs() < 1e-12);
    }
}
