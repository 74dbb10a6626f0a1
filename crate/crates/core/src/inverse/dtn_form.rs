//! DtN quadratic form from ramp-source heat flux measurements.
//!
//! At equilibrium ψ = P⁻¹(κγ|∇w|²) and ∫∂Ω ν·A∇ψ dS = −∫γ|∇w|² = −⟨Λ_γh, h⟩,
//! so q(h) is minus the late-time total flux.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::heat::FluxTrace;
use crate::mesh::BoundaryTrace;

/// Relative change of the total flux over one time unit accepted as
/// equilibrium.
pub const EQUILIBRIUM_RTOL: f64 = 1e-8;

/// Late-time value of one ramp trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Equilibrium {
    /// q(h) = −∫∂Ω flux dS at the last sample.
    pub value: f64,
    /// |Q(t_end) − Q(t_end − 1)| relative to |Q(t_end)|.
    pub relative_change: f64,
}

/// Detects equilibrium on a ramp trace and returns q(h). Fails when the
/// total flux still moves by more than `EQUILIBRIUM_RTOL` over the last time
/// unit, reporting the observed decay rate.
pub fn equilibrium_value(trace: &FluxTrace) -> Result<Equilibrium> {
    let q = trace.total_flux();
    let times = &trace.times;
    let n = q.len();
    if n < 2 {
        return Err(Error::invalid("ramp trace needs at least two samples"));
    }
    let t_end = times[n - 1];
    if t_end < 1.0 + 1.0 {
        return Err(Error::identification("dtn_form", format!("t_end = {t_end} ends before the ramp has settled")));
    }
    let back = |dt: f64| {
        let target = t_end - dt;
        (0..n).min_by(|&a, &b| (times[a] - target).abs().total_cmp(&(times[b] - target).abs())).unwrap()
    };
    let i1 = back(1.0);
    let last = q[n - 1];
    let scale = q.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let change = (last - q[i1]).abs();
    // an identically vanishing trace (h constant) is at equilibrium
    let relative_change = if scale <= 1e-300 { 0.0 } else { change / last.abs().max(1e-14 * scale) };
    if relative_change >= EQUILIBRIUM_RTOL {
        let i2 = back(2.0);
        let prev = (q[i1] - q[i2]).abs();
        let rate = if change > 0.0 && prev > 0.0 { (prev / change).ln() } else { 0.0 };
        return Err(Error::identification(
            "dtn_form",
            format!("equilibrium not reached by t = {t_end}: relative change {relative_change:e} per unit time, decay rate {rate:.4}"),
        ));
    }
    Ok(Equilibrium {
        value: -last,
        relative_change,
    })
}

/// Symmetric table of ⟨Λ_γ h_i, h_j⟩ over a probe set.
#[derive(Clone, Debug, PartialEq)]
pub struct DtnForm {
    pub gram: Vec<Vec<f64>>,
    /// Largest equilibrium relative change over all traces used.
    pub max_relative_change: f64,
}

impl DtnForm {
    /// Builds the table from the diagonal values q(h_i) and, for i < j, the
    /// pair (q(h_i + h_j), q(h_i − h_j)).
    pub fn from_values(diag: &[f64], pairs: &[((usize, usize), f64, f64)]) -> Result<DtnForm> {
        let n = diag.len();
        let mut gram = vec![vec![f64::NAN; n]; n];
        for i in 0..n {
            gram[i][i] = diag[i];
        }
        for &((i, j), qp, qm) in pairs {
            if i >= n || j >= n || i == j {
                return Err(Error::invalid(format!("bad probe pair ({i}, {j})")));
            }
            let v = 0.25 * (qp - qm);
            gram[i][j] = v;
            gram[j][i] = v;
        }
        if gram.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::invalid("probe pairs do not cover the full table"));
        }
        Ok(DtnForm {
            gram,
            max_relative_change: 0.0,
        })
    }

    pub fn to_json(&self) -> Value {
        json!({ "gram": self.gram, "max_relative_change": self.max_relative_change })
    }
}

/// Runs the ramp measurement on every probe and probe pair and polarizes:
/// q(h, h̃) = ¼[q(h + h̃) − q(h − h̃)].
pub fn extract_dtn_form(measure: &dyn Fn(&BoundaryTrace) -> Result<FluxTrace>, probes: &[BoundaryTrace]) -> Result<DtnForm> {
    let mut worst: f64 = 0.0;
    let mut q = |h: &BoundaryTrace| -> Result<f64> {
        let e = equilibrium_value(&measure(h)?)?;
        worst = worst.max(e.relative_change);
        Ok(e.value)
    };
    let mut diag = Vec::with_capacity(probes.len());
    for h in probes {
        diag.push(q(h)?);
    }
    let mut pairs = Vec::new();
    for i in 0..probes.len() {
        for j in i + 1..probes.len() {
            let (a, b) = (&probes[i].values, &probes[j].values);
            let plus = BoundaryTrace::new(a.iter().zip(b).map(|(x, y)| x + y).collect());
            let minus = BoundaryTrace::new(a.iter().zip(b).map(|(x, y)| x - y).collect());
            pairs.push(((i, j), q(&plus)?, q(&minus)?));
        }
    }
    let mut form = DtnForm::from_values(&diag, &pairs)?;
    form.max_relative_change = worst;
    Ok(form)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(values: Vec<f64>, dt: f64) -> FluxTrace {
        FluxTrace {
            times: (0..values.len()).map(|i| i as f64 * dt).collect(),
            values: values.into_iter().map(|v| vec![v]).collect(),
            nodes: vec![0],
            weights: vec![1.0],
            source: "test".into(),
        }
    }

    #[test]
    fn settled_and_unsettled_traces() {
        let settled = trace((0..=40).map(|i| -2.0 * (1.0 - (-(i as f64) * 2.0).exp())).collect(), 0.1);
        let e = equilibrium_value(&settled).unwrap();
        assert!((e.value - 2.0).abs() < 1e-12);
        let slow = trace((0..=40).map(|i| -(1.0 - (-(i as f64) * 0.01).exp())).collect(), 0.1);
        assert!(matches!(equilibrium_value(&slow), Err(Error::Identification { .. })));
        let zero = trace(vec![0.0; 41], 0.1);
        assert_eq!(equilibrium_value(&zero).unwrap().value, 0.0);
    }

    #[test]
    fn polarization_table_is_symmetric() {
        let f = DtnForm::from_values(&[1.0, 2.0], &[((0, 1), 3.0 + 2.0 * 0.5, 3.0 - 2.0 * 0.5)]).unwrap();
        assert_eq!(f.gram[0][1], 0.5);
        assert_eq!(f.gram[1][0], 0.5);
        assert!(DtnForm::from_values(&[1.0, 2.0], &[]).is_err());
    }
}
