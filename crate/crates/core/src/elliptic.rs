//! Conductivity equation, Dirichlet-to-Neumann map and the weighted operator
//! P = −κ∇·(A∇·) with homogeneous Dirichlet conditions.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fem;
use crate::linalg::{self, BandedCholesky, Csr};
use crate::mesh::{boundary_lumped_mass, BoundaryTrace, Mesh, ScalarField, TensorField};

/// Relative residual accepted from the direct solves.
pub const SOLVER_TOL: f64 = 1e-10;

/// Default relative tolerance for grouping eigenvalues into clusters.
pub const CLUSTER_RTOL: f64 = 1e-6;

pub(crate) fn gather(mesh: &Mesh, full: &[f64]) -> Vec<f64> {
    mesh.interior_nodes().iter().map(|&i| full[i]).collect()
}

pub(crate) fn gather_boundary(mesh: &Mesh, full: &[f64]) -> Vec<f64> {
    mesh.boundary_nodes.iter().map(|&i| full[i]).collect()
}

pub(crate) fn scatter(mesh: &Mesh, interior: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; mesh.node_count()];
    for (k, &i) in mesh.interior_nodes().iter().enumerate() {
        full[i] = interior[k];
    }
    full
}

/// Groups ascending values into runs whose consecutive relative gaps are
/// at most `rtol`.
pub fn cluster_sorted(values: &[f64], rtol: f64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        let split = i == values.len() || (values[i] - values[i - 1]).abs() > rtol * values[i].abs().max(values[i - 1].abs());
        if split {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// Discrete conductivity problem ∇·γ∇w = 0.
pub struct Conductivity {
    pub mesh: Arc<Mesh>,
    pub gamma: ScalarField,
    pub k: Csr,
    k_ii: Csr,
    k_ib: Csr,
    chol: BandedCholesky,
    lumped: Vec<f64>,
}

impl Conductivity {
    pub fn new(mesh: Arc<Mesh>, gamma: ScalarField) -> Result<Self> {
        gamma.check_mesh(&mesh)?;
        for (i, &g) in gamma.values.iter().enumerate() {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::invalid(format!("γ must be strictly positive, found {g} at node {i}")));
            }
        }
        let k = fem::stiffness(&mesh, Some(&gamma.values), None);
        let k_ii = k.select(mesh.interior_nodes(), mesh.interior_nodes());
        let k_ib = k.select(mesh.interior_nodes(), &mesh.boundary_nodes);
        let chol = BandedCholesky::factor(&k_ii)?;
        let lumped = boundary_lumped_mass(&mesh);
        Ok(Conductivity {
            mesh,
            gamma,
            k,
            k_ii,
            k_ib,
            chol,
            lumped,
        })
    }

    /// w with w|∂Ω = h solving the discrete weak form.
    pub fn solve(&self, h: &BoundaryTrace) -> Result<ScalarField> {
        h.check_mesh(&self.mesh)?;
        let rhs: Vec<f64> = self.k_ib.mul(&h.values).iter().map(|v| -v).collect();
        let wi = self.chol.solve(&rhs);
        let r = self.k_ii.mul(&wi);
        let res = linalg::norm(&r.iter().zip(&rhs).map(|(a, b)| a - b).collect::<Vec<_>>());
        let scale = linalg::norm(&rhs);
        if scale > 0.0 && res > SOLVER_TOL * scale {
            return Err(Error::solver(format!("conductivity solve residual {:e}", res / scale)));
        }
        let mut w = scatter(&self.mesh, &wi);
        for (k, &b) in self.mesh.boundary_nodes.iter().enumerate() {
            w[b] = h.values[k];
        }
        Ok(ScalarField::new(w))
    }

    /// Variational flux γ∂_ν w of a discrete solution.
    pub fn flux(&self, w: &ScalarField) -> BoundaryTrace {
        let kw = self.k.mul(&w.values);
        BoundaryTrace::new(
            self.mesh
                .boundary_nodes
                .iter()
                .zip(&self.lumped)
                .map(|(&b, l)| kw[b] / l)
                .collect(),
        )
    }

    /// ∫ γ∇w·∇w.
    pub fn energy(&self, w: &ScalarField) -> f64 {
        linalg::dot(&w.values, &self.k.mul(&w.values))
    }

    pub fn dtn(&self) -> Result<DtNMap> {
        let mesh = &self.mesh;
        let nb = mesh.boundary_nodes.len();
        let k_bb = self.k.select(&mesh.boundary_nodes, &mesh.boundary_nodes).to_dense();
        let mut schur = k_bb;
        let kib_dense = self.k_ib.to_dense();
        for j in 0..nb {
            let col: Vec<f64> = kib_dense.column(j).iter().copied().collect();
            let x = self.chol.solve(&col);
            for i in 0..nb {
                let mut s = 0.0;
                for (r, &xv) in x.iter().enumerate() {
                    s += kib_dense[(r, i)] * xv;
                }
                schur[(i, j)] -= s;
            }
        }
        schur = (&schur + schur.transpose()) * 0.5;
        let mut matrix = schur.clone();
        for i in 0..nb {
            for j in 0..nb {
                matrix[(i, j)] /= self.lumped[i];
            }
        }
        Ok(DtNMap {
            matrix,
            schur,
            lumped: self.lumped.clone(),
        })
    }
}

pub fn solve_conductivity(mesh: Arc<Mesh>, gamma: &ScalarField, h: &BoundaryTrace) -> Result<ScalarField> {
    Conductivity::new(mesh, gamma.clone())?.solve(h)
}

/// Dense discrete DtN map on boundary nodal values.
#[derive(Clone, Debug)]
pub struct DtNMap {
    /// Λ: boundary values ↦ nodal flux values.
    pub matrix: DMatrix<f64>,
    /// Schur complement S = L Λ, L the lumped boundary mass.
    pub schur: DMatrix<f64>,
    pub lumped: Vec<f64>,
}

impl DtNMap {
    pub fn apply(&self, h: &BoundaryTrace) -> BoundaryTrace {
        let v = nalgebra::DVector::from_column_slice(&h.values);
        BoundaryTrace::new((&self.matrix * v).iter().copied().collect())
    }

    /// ⟨Λh₁, h₂⟩ in the boundary inner product.
    pub fn form(&self, h1: &BoundaryTrace, h2: &BoundaryTrace) -> f64 {
        let a = nalgebra::DVector::from_column_slice(&h1.values);
        let b = nalgebra::DVector::from_column_slice(&h2.values);
        (a.transpose() * &self.schur * b)[(0, 0)]
    }
}

pub fn dtn_map(mesh: Arc<Mesh>, gamma: &ScalarField) -> Result<DtNMap> {
    Conductivity::new(mesh, gamma.clone())?.dtn()
}

/// Assembled operator P = −κ∇·(A∇·) on interior nodes. The discrete problem
/// is K v = λ M_κ v with M_κ the mass matrix weighted by 1/κ, so P is
/// self-adjoint in the discrete L²_κ inner product.
pub struct OperatorP {
    pub mesh: Arc<Mesh>,
    pub kappa: ScalarField,
    pub tensor: TensorField,
    /// Smallest eigenvalue of A over the nodes.
    pub c0: f64,
    pub k: Csr,
    pub mk: Csr,
    pub m: Csr,
    k_ii: Csr,
    mk_ii: Csr,
    m_ii: Csr,
    k_chol: BandedCholesky,
    mk_chol: BandedCholesky,
    lumped: Vec<f64>,
}

impl OperatorP {
    pub fn interior_dim(&self) -> usize {
        self.mesh.interior_node_count
    }

    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        gather(&self.mesh, full)
    }

    pub fn scatter(&self, interior: &[f64]) -> Vec<f64> {
        scatter(&self.mesh, interior)
    }

    pub fn k_ii(&self) -> &Csr {
        &self.k_ii
    }

    pub fn mk_ii(&self) -> &Csr {
        &self.mk_ii
    }

    pub fn m_ii(&self) -> &Csr {
        &self.m_ii
    }

    pub fn k_factor(&self) -> &BandedCholesky {
        &self.k_chol
    }

    pub fn mk_factor(&self) -> &BandedCholesky {
        &self.mk_chol
    }

    pub fn lumped_boundary_mass(&self) -> &[f64] {
        &self.lumped
    }

    /// P v = M_κ⁻¹ K v for interior vectors.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut w = self.k_ii.mul(v);
        self.mk_chol.solve_in_place(&mut w);
        w
    }

    /// (u, v)_{L²_κ}.
    pub fn weighted_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        linalg::dot(u, &self.mk_ii.mul(v))
    }

    /// ‖v‖_{L²} of an interior vector.
    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        linalg::dot(v, &self.m_ii.mul(v)).max(0.0).sqrt()
    }

    /// ∫ A∇v·∇v.
    pub fn energy(&self, v: &[f64]) -> f64 {
        linalg::dot(v, &self.k_ii.mul(v))
    }

    /// Load vector M F (all nodes) for a power density F.
    pub fn power_load(&self, f: &ScalarField) -> Vec<f64> {
        self.m.mul(&f.values)
    }

    /// Load vector M_κ G (all nodes), the weak form of a source G = κF.
    pub fn weighted_load(&self, g: &ScalarField) -> Vec<f64> {
        self.mk.mul(&g.values)
    }

    /// Solves P u = G with u|∂Ω = 0, i.e. K u = M_κ G. Returns the nodal field.
    pub fn solve_inverse(&self, g: &ScalarField) -> Result<ScalarField> {
        g.check_mesh(&self.mesh)?;
        let load = self.gather(&self.weighted_load(g));
        let u = self.solve_load(&load)?;
        Ok(ScalarField::new(self.scatter(&u)))
    }

    /// Solves K_II u = b for an interior load vector.
    pub fn solve_load(&self, b: &[f64]) -> Result<Vec<f64>> {
        let u = self.k_chol.solve(b);
        let r = self.k_ii.mul(&u);
        let res = linalg::norm(&r.iter().zip(b).map(|(a, c)| a - c).collect::<Vec<_>>());
        let scale = linalg::norm(b);
        if scale > 0.0 && res > SOLVER_TOL * scale {
            return Err(Error::solver(format!("P⁻¹ residual {:e}", res / scale)));
        }
        Ok(u)
    }

    /// Variational flux ν·A∇u of an interior state u with time derivative
    /// u̇ (interior) and full load vector: it satisfies
    /// ∫∂Ω g v = ∫ A∇u·∇v + ∫ κ⁻¹u̇ v − ⟨load, v⟩ for every boundary test v.
    pub fn flux(&self, u: &[f64], udot: Option<&[f64]>, load: Option<&[f64]>) -> BoundaryTrace {
        let ku = self.k.mul(&self.scatter(u));
        let mut r: Vec<f64> = gather_boundary(&self.mesh, &ku);
        if let Some(ud) = udot {
            let mu = self.mk.mul(&self.scatter(ud));
            for (k, &b) in self.mesh.boundary_nodes.iter().enumerate() {
                r[k] += mu[b];
            }
        }
        if let Some(l) = load {
            for (k, &b) in self.mesh.boundary_nodes.iter().enumerate() {
                r[k] -= l[b];
            }
        }
        BoundaryTrace::new(r.iter().zip(&self.lumped).map(|(a, w)| a / w).collect())
    }

    /// Flux of an eigenfunction: ν·A∇φ with −∇·A∇φ = λκ⁻¹φ.
    pub fn eigen_flux(&self, phi: &[f64], lambda: f64) -> BoundaryTrace {
        let kphi = self.k.mul(&self.scatter(phi));
        let mphi = self.mk.mul(&self.scatter(phi));
        let r: Vec<f64> = self
            .mesh
            .boundary_nodes
            .iter()
            .map(|&b| kphi[b] - lambda * mphi[b])
            .collect();
        BoundaryTrace::new(r.iter().zip(&self.lumped).map(|(a, w)| a / w).collect())
    }

    /// Lowest `count` Dirichlet eigenpairs. The last cluster is completed
    /// when more eigenvalues in it are available.
    pub fn spectrum(&self, count: usize, cluster_rtol: f64, seed: u64) -> Result<SpectralData> {
        if count == 0 {
            return Err(Error::invalid("eigenpair count must be ≥ 1"));
        }
        let n = self.interior_dim();
        let want = (count + 6).min(n);
        let pairs = linalg::generalized_lowest(&self.k_ii, &self.mk_ii, &self.k_chol, want, seed)?;
        let clusters = cluster_sorted(&pairs.values, cluster_rtol);
        let mut take = 0;
        for c in &clusters {
            if take >= count {
                break;
            }
            take = c.end;
        }
        let take = take.min(pairs.values.len());
        let mut eigenvalues = Vec::with_capacity(take);
        let mut eigenfunctions = Vec::with_capacity(take);
        let mut flux_traces = Vec::with_capacity(take);
        let mut residuals = Vec::with_capacity(take);
        let ones = self.gather(&vec![1.0; self.mesh.node_count()]);
        let m_ones = self.m_ii.mul(&ones);
        for idx in 0..take {
            let lam = pairs.values[idx];
            if !(lam > 0.0) {
                return Err(Error::solver(format!("non-positive eigenvalue {lam}")));
            }
            let mut v = pairs.vectors[idx].clone();
            let nrm = self.weighted_inner(&v, &v).sqrt();
            let mean = linalg::dot(&m_ones, &v);
            let sign = if mean.abs() > 1e-8 * nrm {
                mean.signum()
            } else {
                let big = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
                big.signum()
            };
            for x in v.iter_mut() {
                *x *= sign / nrm;
            }
            let mut r: Vec<f64> = self
                .k_ii
                .mul(&v)
                .iter()
                .zip(self.mk_ii.mul(&v))
                .map(|(a, b)| a - lam * b)
                .collect();
            let r0 = r.clone();
            self.mk_chol.solve_in_place(&mut r);
            residuals.push(linalg::dot(&r0, &r).max(0.0).sqrt() / lam);
            flux_traces.push(self.eigen_flux(&v, lam));
            eigenfunctions.push(ScalarField::new(self.scatter(&v)));
            eigenvalues.push(lam);
        }
        let multiplicities = cluster_sorted(&eigenvalues, cluster_rtol).iter().map(|c| c.len()).collect();
        Ok(SpectralData {
            eigenvalues,
            multiplicities,
            eigenfunctions,
            flux_traces,
            kappa: self.kappa.clone(),
            residuals,
        })
    }
}

pub fn assemble_p(mesh: Arc<Mesh>, kappa: &ScalarField, tensor: &TensorField) -> Result<OperatorP> {
    kappa.check_mesh(&mesh)?;
    for (i, &k) in kappa.values.iter().enumerate() {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::invalid(format!("κ must be strictly positive, found {k} at node {i}")));
        }
    }
    if tensor.values.len() != mesh.node_count() || tensor.dim != mesh.dim {
        return Err(Error::invalid("tensor field does not match the mesh"));
    }
    let c0 = tensor.check(f64::MIN_POSITIVE)?;
    let inv_kappa: Vec<f64> = kappa.values.iter().map(|k| 1.0 / k).collect();
    let k = fem::stiffness(&mesh, None, Some(tensor));
    let mk = fem::mass(&mesh, Some(&inv_kappa));
    let m = fem::mass(&mesh, None);
    let ii = mesh.interior_nodes().to_vec();
    let k_ii = k.select(&ii, &ii);
    let mk_ii = mk.select(&ii, &ii);
    let m_ii = m.select(&ii, &ii);
    let k_chol = BandedCholesky::factor(&k_ii)?;
    let mk_chol = BandedCholesky::factor(&mk_ii)?;
    let lumped = boundary_lumped_mass(&mesh);
    Ok(OperatorP {
        mesh,
        kappa: kappa.clone(),
        tensor: tensor.clone(),
        c0,
        k,
        mk,
        m,
        k_ii,
        mk_ii,
        m_ii,
        k_chol,
        mk_chol,
        lumped,
    })
}

/// Dirichlet eigenvalues, weighted-orthonormal eigenfunctions and their
/// boundary fluxes.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    /// Multiplicity of each cluster, in order.
    pub multiplicities: Vec<usize>,
    pub eigenfunctions: Vec<ScalarField>,
    pub flux_traces: Vec<BoundaryTrace>,
    pub kappa: ScalarField,
    /// ‖Pφ − λφ‖_{L²_κ} / λ per eigenpair.
    pub residuals: Vec<f64>,
}

impl SpectralData {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Index ranges of the clusters.
    pub fn clusters(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.multiplicities.len());
        let mut s = 0;
        for &m in &self.multiplicities {
            out.push(s..s + m);
            s += m;
        }
        out
    }

    /// Mean eigenvalue of each cluster.
    pub fn cluster_values(&self) -> Vec<f64> {
        self.clusters()
            .iter()
            .map(|r| self.eigenvalues[r.clone()].iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "eigenvalues": self.eigenvalues,
            "multiplicities": self.multiplicities,
            "residuals": self.residuals,
            "flux_traces": self.flux_traces.iter().map(|t| t.values.clone()).collect::<Vec<_>>(),
        })
    }
}

pub fn dirichlet_spectrum(p: &OperatorP, count: usize, cluster_rtol: f64) -> Result<SpectralData> {
    p.spectrum(count, cluster_rtol, 0x5eed)
}

/// Variational flux ν·A∇u for a discrete u with interior residual `rhs`:
/// ∫∂Ω g v dS = ∫Ω A∇u·∇v − ∫Ω rhs v for every boundary test function v.
pub fn neumann_flux(mesh: &Mesh, tensor: &TensorField, u: &ScalarField, rhs: &ScalarField) -> Result<BoundaryTrace> {
    u.check_mesh(mesh)?;
    rhs.check_mesh(mesh)?;
    if tensor.values.len() != mesh.node_count() {
        return Err(Error::invalid("tensor field does not match the mesh"));
    }
    let k = fem::stiffness(mesh, None, Some(tensor));
    let m = fem::mass(mesh, None);
    let ku = k.mul(&u.values);
    let mr = m.mul(&rhs.values);
    let lumped = boundary_lumped_mass(mesh);
    Ok(BoundaryTrace::new(
        mesh.boundary_nodes
            .iter()
            .zip(&lumped)
            .map(|(&b, w)| (ku[b] - mr[b]) / w)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, build_disk_mesh};
    use std::f64::consts::PI;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(build_box_mesh(2, &[1.0, 1.0], &[n, n]).unwrap())
    }

    #[test]
    fn linear_data_is_reproduced() {
        let mesh = square(8);
        let g = ScalarField::constant(&mesh, 1.0);
        let h = BoundaryTrace::from_fn(&mesh, |p| p[0]);
        let w = solve_conductivity(mesh.clone(), &g, &h).unwrap();
        for i in 0..mesh.node_count() {
            assert!((w.values[i] - mesh.point(i)[0]).abs() < 1e-12);
        }
        let c = solve_conductivity(mesh.clone(), &g, &BoundaryTrace::from_fn(&mesh, |_| 1.0)).unwrap();
        assert!(c.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_nonpositive_gamma() {
        let mesh = square(4);
        let g = ScalarField::from_fn(&mesh, |p| p[0] - 0.5);
        assert!(Conductivity::new(mesh, g).is_err());
    }

    #[test]
    fn dtn_form_of_x() {
        let mesh = square(8);
        let c = Conductivity::new(mesh.clone(), ScalarField::constant(&mesh, 1.0)).unwrap();
        let d = c.dtn().unwrap();
        let h = BoundaryTrace::from_fn(&mesh, |p| p[0]);
        assert!((d.form(&h, &h) - 1.0).abs() < 1e-10);
        let flux = d.apply(&h);
        for (k, &b) in mesh.boundary_nodes.iter().enumerate() {
            let p = mesh.point(b);
            let on_y_face_only = (p[1] < 1e-12 || p[1] > 1.0 - 1e-12) && p[0] > 1e-12 && p[0] < 1.0 - 1e-12;
            if on_y_face_only {
                assert!(flux.values[k].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dtn_scales_with_constant_gamma() {
        let mesh = square(6);
        let d1 = dtn_map(mesh.clone(), &ScalarField::constant(&mesh, 1.0)).unwrap();
        let d3 = dtn_map(mesh.clone(), &ScalarField::constant(&mesh, 3.0)).unwrap();
        assert!((d3.matrix - d1.matrix * 3.0).abs().max() < 1e-10);
    }

    #[test]
    fn first_eigenvalues_of_square() {
        let mesh = square(32);
        let p = assemble_p(mesh.clone(), &ScalarField::constant(&mesh, 1.0), &TensorField::identity(&mesh)).unwrap();
        let s = dirichlet_spectrum(&p, 3, CLUSTER_RTOL).unwrap();
        assert!((s.eigenvalues[0] / (2.0 * PI * PI) - 1.0).abs() < 1e-2);
        assert_eq!(s.multiplicities[..2], [1, 2]);
        assert!(s.residuals.iter().all(|r| *r < 1e-8));
    }

    #[test]
    fn eigenvalues_scale_with_kappa() {
        let mesh = square(10);
        let a = TensorField::identity(&mesh);
        let k1 = ScalarField::from_fn(&mesh, |p| 1.0 + 0.5 * p[0]);
        let k2 = ScalarField::new(k1.values.iter().map(|v| 2.5 * v).collect());
        let s1 = assemble_p(mesh.clone(), &k1, &a).unwrap().spectrum(5, CLUSTER_RTOL, 1).unwrap();
        let s2 = assemble_p(mesh.clone(), &k2, &a).unwrap().spectrum(5, CLUSTER_RTOL, 1).unwrap();
        for (x, y) in s1.eigenvalues.iter().zip(&s2.eigenvalues) {
            assert!((2.5 * x - y).abs() < 1e-10 * y);
        }
    }

    #[test]
    fn disk_first_eigenvalue() {
        let mesh = Arc::new(build_disk_mesh(1.0, 40).unwrap());
        let p = assemble_p(mesh.clone(), &ScalarField::constant(&mesh, 1.0), &TensorField::identity(&mesh)).unwrap();
        let s = dirichlet_spectrum(&p, 1, CLUSTER_RTOL).unwrap();
        let j01 = 2.404_825_557_695_773_f64;
        assert!((s.eigenvalues[0] / (j01 * j01) - 1.0).abs() < 2e-2);
    }

    #[test]
    fn inverse_of_eigenfunction() {
        let mesh = square(12);
        let p = assemble_p(mesh.clone(), &ScalarField::constant(&mesh, 1.0), &TensorField::identity(&mesh)).unwrap();
        let s = dirichlet_spectrum(&p, 1, CLUSTER_RTOL).unwrap();
        let u = p.solve_inverse(&s.eigenfunctions[0]).unwrap();
        for (a, b) in u.values.iter().zip(&s.eigenfunctions[0].values) {
            assert!((a - b / s.eigenvalues[0]).abs() < 1e-8);
        }
        let z = p.solve_inverse(&ScalarField::constant(&mesh, 0.0)).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flux_of_linear_function() {
        let mesh = square(8);
        let u = ScalarField::from_fn(&mesh, |p| p[0]);
        let g = neumann_flux(&mesh, &TensorField::identity(&mesh), &u, &ScalarField::constant(&mesh, 0.0)).unwrap();
        for (k, &b) in mesh.boundary_nodes.iter().enumerate() {
            let p = mesh.point(b);
            let corner = (p[0] < 1e-12 || p[0] > 1.0 - 1e-12) && (p[1] < 1e-12 || p[1] > 1.0 - 1e-12);
            if corner {
                continue;
            }
            let expected = if p[0] < 1e-12 {
                -1.0
            } else if p[0] > 1.0 - 1e-12 {
                1.0
            } else {
                0.0
            };
            assert!((g.values[k] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn clustering() {
        let c = cluster_sorted(&[1.0, 2.0, 2.0 + 1e-9, 3.0], 1e-6);
        assert_eq!(c, vec![0..1, 1..3, 3..4]);
    }
}
