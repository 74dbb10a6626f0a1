//! P1 finite element assembly on a `Mesh`.

use crate::linalg::Csr;
use crate::mesh::{Mesh, TensorField};

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

fn empty(mesh: &Mesh) -> Csr {
    let (indptr, indices) = mesh.pattern().clone();
    Csr::with_pattern(mesh.node_count(), indptr, indices)
}

/// Stiffness matrix of ∫ c A∇u·∇v. The coefficient on each element is the
/// mean of the nodal products cᵢAᵢ, which is the exact element average for
/// linearly interpolated coefficients. Either factor may be omitted.
pub fn stiffness(mesh: &Mesh, scalar: Option<&[f64]>, tensor: Option<&TensorField>) -> Csr {
    let mut k = empty(mesh);
    let d = mesh.dim;
    let nv = d + 1;
    for e in 0..mesh.elements.len() {
        let el = mesh.element(e);
        let g = mesh.geometry(e);
        let mut a = [[0.0; 3]; 3];
        for &v in el {
            let c = scalar.map_or(1.0, |s| s[v]);
            for r in 0..d {
                for q in 0..d {
                    let t = match tensor {
                        Some(t) => t.values[v][r][q],
                        None => (r == q) as u8 as f64,
                    };
                    a[r][q] += c * t / nv as f64;
                }
            }
        }
        for i in 0..nv {
            let mut agi = [0.0; 3];
            for r in 0..d {
                for q in 0..d {
                    agi[r] += a[r][q] * g.grads[i][q];
                }
            }
            for j in 0..nv {
                let mut s = 0.0;
                for r in 0..d {
                    s += agi[r] * g.grads[j][r];
                }
                k.add(el[j], el[i], g.volume * s);
            }
        }
    }
    k
}

/// Mass matrix ∫ w u v with w the linear interpolant of the nodal weight,
/// integrated exactly. Without a weight this is the standard P1 mass matrix.
pub fn mass(mesh: &Mesh, weight: Option<&[f64]>) -> Csr {
    let mut m = empty(mesh);
    let d = mesh.dim;
    let nv = d + 1;
    let df = factorial(d);
    // ∫ λᵢλⱼλₖ = |T| d! a!b!c! / (d + 3)!
    let c3 = df / factorial(d + 3);
    let c2 = df / factorial(d + 2);
    for e in 0..mesh.elements.len() {
        let el = mesh.element(e);
        let vol = mesh.geometry(e).volume;
        for i in 0..nv {
            for j in 0..nv {
                let v = match weight {
                    None => vol * c2 * if i == j { 2.0 } else { 1.0 },
                    Some(w) => {
                        let mut s = 0.0;
                        for k in 0..nv {
                            let mult = if i == j && j == k {
                                6.0
                            } else if i == j || i == k || j == k {
                                2.0
                            } else {
                                1.0
                            };
                            s += w[el[k]] * mult;
                        }
                        vol * c3 * s
                    }
                };
                m.add(el[i], el[j], v);
            }
        }
    }
    m
}

/// Gradient of the P1 interpolant on element `e`.
pub fn element_gradient(mesh: &Mesh, e: usize, u: &[f64]) -> [f64; 3] {
    let g = mesh.geometry(e);
    let mut out = [0.0; 3];
    for (l, &v) in mesh.element(e).iter().enumerate() {
        for r in 0..mesh.dim {
            out[r] += u[v] * g.grads[l][r];
        }
    }
    out
}

/// Element-constant field averaged to nodes with volume weights. The P1
/// integral of the result equals Σ |T| f_T exactly.
pub fn element_to_nodal(mesh: &Mesh, per_element: &[f64]) -> Vec<f64> {
    let n = mesh.node_count();
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for e in 0..mesh.elements.len() {
        let vol = mesh.geometry(e).volume;
        for &v in mesh.element(e) {
            num[v] += vol * per_element[e];
            den[v] += vol;
        }
    }
    num.iter().zip(&den).map(|(a, b)| a / b).collect()
}

/// Mean of nodal values over each element.
pub fn element_means(mesh: &Mesh, u: &[f64]) -> Vec<f64> {
    let nv = (mesh.dim + 1) as f64;
    (0..mesh.elements.len())
        .map(|e| mesh.element(e).iter().map(|&v| u[v]).sum::<f64>() / nv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    #[test]
    fn mass_total_is_volume() {
        for dim in [2, 3] {
            let lengths = vec![1.0; dim];
            let divs = vec![3; dim];
            let mesh = build_box_mesh(dim, &lengths, &divs).unwrap();
            let m = mass(&mesh, None);
            let ones = vec![1.0; mesh.node_count()];
            let total: f64 = m.mul(&ones).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            let w = vec![2.5; mesh.node_count()];
            let mw = mass(&mesh, Some(&w));
            let total_w: f64 = mw.mul(&ones).iter().sum();
            assert!((total_w - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_mass_integrates_linear_weight() {
        let mesh = build_box_mesh(2, &[1.0, 1.0], &[5, 5]).unwrap();
        let w: Vec<f64> = (0..mesh.node_count()).map(|i| 1.0 + mesh.point(i)[0]).collect();
        let m = mass(&mesh, Some(&w));
        let ones = vec![1.0; mesh.node_count()];
        let x: Vec<f64> = (0..mesh.node_count()).map(|i| mesh.point(i)[1]).collect();
        // ∫ (1 + x) y dx dy = 1.5 · 0.5
        let v: f64 = x.iter().zip(m.mul(&ones)).map(|(a, b)| a * b).sum();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn stiffness_annihilates_constants_and_reproduces_energy() {
        let mesh = build_box_mesh(3, &[1.0, 1.0, 1.0], &[3, 3, 3]).unwrap();
        let k = stiffness(&mesh, None, None);
        let ones = vec![1.0; mesh.node_count()];
        assert!(k.mul(&ones).iter().all(|v| v.abs() < 1e-12));
        let x: Vec<f64> = (0..mesh.node_count()).map(|i| mesh.point(i)[2]).collect();
        let e: f64 = x.iter().zip(k.mul(&x)).map(|(a, b)| a * b).sum();
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_linear_function() {
        let mesh = build_box_mesh(2, &[2.0, 1.0], &[4, 3]).unwrap();
        let u: Vec<f64> = (0..mesh.node_count())
            .map(|i| 3.0 * mesh.point(i)[0] - mesh.point(i)[1])
            .collect();
        for e in 0..mesh.elements.len() {
            let g = element_gradient(&mesh, e, &u);
            assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12);
        }
    }
}
