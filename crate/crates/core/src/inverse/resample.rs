//! Transfer of boundary traces between two meshes of the same domain.

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTrace, Mesh};

const GEOM_TOL: f64 = 1e-9;

/// Linear interpolation of a boundary trace on `from` at the boundary nodes
/// of `to`. Every target node must coincide with a source boundary node or
/// lie on a source boundary facet.
pub fn resample_boundary(from: &Mesh, trace: &BoundaryTrace, to: &Mesh) -> Result<BoundaryTrace> {
    trace.check_mesh(from)?;
    if from.dim != to.dim {
        return Err(Error::invalid("meshes have different dimensions"));
    }
    let mut out = Vec::with_capacity(to.boundary_nodes.len());
    for &n in &to.boundary_nodes {
        let p = to.nodes[n];
        out.push(sample_at(from, trace, &p)?);
    }
    Ok(BoundaryTrace::new(out))
}

fn value(from: &Mesh, trace: &BoundaryTrace, node: usize) -> f64 {
    trace.values[from.boundary_index(node).expect("facet node on the boundary")]
}

fn sample_at(from: &Mesh, trace: &BoundaryTrace, p: &[f64; 3]) -> Result<f64> {
    let d = from.dim;
    let dist = |a: &[f64; 3]| (0..d).map(|i| (a[i] - p[i]).powi(2)).sum::<f64>().sqrt();
    for f in &from.boundary_facets {
        let nodes = &f.nodes[..d];
        let x: Vec<[f64; 3]> = nodes.iter().map(|&n| from.nodes[n]).collect();
        if let Some(k) = x.iter().position(|q| dist(q) < GEOM_TOL) {
            return Ok(value(from, trace, nodes[k]));
        }
        if d == 2 {
            let e = [x[1][0] - x[0][0], x[1][1] - x[0][1]];
            let len2 = e[0] * e[0] + e[1] * e[1];
            let s = ((p[0] - x[0][0]) * e[0] + (p[1] - x[0][1]) * e[1]) / len2;
            let q = [x[0][0] + s * e[0], x[0][1] + s * e[1], 0.0];
            if (-1e-12..=1.0 + 1e-12).contains(&s) && dist(&q) < GEOM_TOL {
                return Ok((1.0 - s) * value(from, trace, nodes[0]) + s * value(from, trace, nodes[1]));
            }
        } else {
            let e1 = [0, 1, 2].map(|i| x[1][i] - x[0][i]);
            let e2 = [0, 1, 2].map(|i| x[2][i] - x[0][i]);
            let r = [0, 1, 2].map(|i| p[i] - x[0][i]);
            let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let (a11, a12, a22) = (dot(&e1, &e1), dot(&e1, &e2), dot(&e2, &e2));
            let (b1, b2) = (dot(&r, &e1), dot(&r, &e2));
            let det = a11 * a22 - a12 * a12;
            let s = (a22 * b1 - a12 * b2) / det;
            let t = (a11 * b2 - a12 * b1) / det;
            let q = [0, 1, 2].map(|i| x[0][i] + s * e1[i] + t * e2[i]);
            if s >= -1e-12 && t >= -1e-12 && s + t <= 1.0 + 1e-12 && dist(&q) < GEOM_TOL {
                return Ok((1.0 - s - t) * value(from, trace, nodes[0]) + s * value(from, trace, nodes[1]) + t * value(from, trace, nodes[2]));
            }
        }
    }
    Err(Error::invalid(format!("point {:?} is not on the source boundary", &p[..d])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    #[test]
    fn linear_traces_transfer_exactly() {
        let fine = build_box_mesh(2, &[1.0, 1.0], &[8, 8]).unwrap();
        let coarse = build_box_mesh(2, &[1.0, 1.0], &[3, 5]).unwrap();
        let f = |p: &[f64]| 2.0 * p[0] - p[1] + 0.5;
        let tr = BoundaryTrace::from_fn(&fine, f);
        let out = resample_boundary(&fine, &tr, &coarse).unwrap();
        let want = BoundaryTrace::from_fn(&coarse, f);
        for (a, b) in out.values.iter().zip(&want.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
