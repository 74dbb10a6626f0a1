//! Structured simplicial meshes, nodal coefficient fields and the basic
//! quadratures over Ω and ∂Ω.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::{Matrix3, SymmetricEigen};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Absolute geometric tolerance.
pub const GEOM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Box { lengths: [f64; 3] },
    Disk { radius: f64 },
    /// Box periodic in the first coordinate; boundary faces are the two
    /// planes normal to the last axis.
    PeriodicSlab { lengths: [f64; 3] },
}

#[derive(Clone, Debug)]
pub struct BoundaryFacet {
    pub nodes: [usize; 3],
    pub normal: [f64; 3],
    pub measure: f64,
}

/// Per-element volume and gradients of the barycentric coordinates.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry {
    pub volume: f64,
    pub grads: [[f64; 3]; 4],
}

#[derive(Debug)]
pub struct Mesh {
    pub dim: usize,
    pub nodes: Vec<[f64; 3]>,
    pub elements: Vec<[usize; 4]>,
    pub boundary_nodes: Vec<usize>,
    pub boundary_facets: Vec<BoundaryFacet>,
    pub interior_node_count: usize,
    pub shape: Shape,
    interior_nodes: Vec<usize>,
    interior_pos: Vec<usize>,
    boundary_pos: Vec<usize>,
    geometry: Vec<ElementGeometry>,
    pattern: OnceLock<(Vec<usize>, Vec<usize>)>,
}

impl Mesh {
    fn assemble(dim: usize, nodes: Vec<[f64; 3]>, elements: Vec<[usize; 4]>, shape: Shape) -> Result<Mesh> {
        let period = match shape {
            Shape::PeriodicSlab { lengths } => Some(lengths[0]),
            _ => None,
        };
        let mut elements = elements;
        let mut geometry = Vec::with_capacity(elements.len());
        for el in elements.iter_mut() {
            let mut g = simplex_geometry(dim, &element_points(dim, &nodes, el, period))?;
            if g.0 < 0.0 {
                el.swap(0, 1);
                g = simplex_geometry(dim, &element_points(dim, &nodes, el, period))?;
            }
            if g.0 <= 0.0 {
                return Err(Error::invalid("degenerate element"));
            }
            geometry.push(ElementGeometry {
                volume: g.0,
                grads: g.1,
            });
        }

        // Facets belonging to exactly one element lie on the boundary.
        let mut count: HashMap<[usize; 3], (usize, usize, usize)> = HashMap::new();
        let nv = dim + 1;
        for (e, el) in elements.iter().enumerate() {
            for skip in 0..nv {
                let mut key = [usize::MAX; 3];
                let mut t = 0;
                for (l, &v) in el.iter().take(nv).enumerate() {
                    if l != skip {
                        key[t] = v;
                        t += 1;
                    }
                }
                key[..dim].sort_unstable();
                let entry = count.entry(key).or_insert((0, e, skip));
                entry.0 += 1;
            }
        }
        let mut facets_raw: Vec<([usize; 3], usize, usize)> = count
            .into_iter()
            .filter(|(_, v)| v.0 == 1)
            .map(|(k, v)| (k, v.1, v.2))
            .collect();
        facets_raw.sort_by_key(|f| (f.1, f.2));

        let mut boundary_facets = Vec::with_capacity(facets_raw.len());
        for (key, e, skip) in facets_raw {
            let pts = element_points(dim, &nodes, &elements[e], period);
            let fpts: Vec<[f64; 3]> = (0..nv).filter(|&l| l != skip).map(|l| pts[l]).collect();
            let opposite = pts[skip];
            let (mut normal, measure) = facet_normal(dim, &fpts);
            let d: f64 = (0..dim).map(|c| (opposite[c] - fpts[0][c]) * normal[c]).sum();
            if d > 0.0 {
                for c in normal.iter_mut() {
                    *c = -*c;
                }
            }
            boundary_facets.push(BoundaryFacet {
                nodes: key,
                normal,
                measure,
            });
        }

        let n = nodes.len();
        let mut is_b = vec![false; n];
        for f in &boundary_facets {
            for &v in f.nodes.iter().take(dim) {
                is_b[v] = true;
            }
        }
        let mut boundary_nodes = Vec::new();
        let mut interior_nodes = Vec::new();
        let mut boundary_pos = vec![usize::MAX; n];
        let mut interior_pos = vec![usize::MAX; n];
        for (i, &b) in is_b.iter().enumerate() {
            if b {
                boundary_pos[i] = boundary_nodes.len();
                boundary_nodes.push(i);
            } else {
                interior_pos[i] = interior_nodes.len();
                interior_nodes.push(i);
            }
        }
        Ok(Mesh {
            dim,
            interior_node_count: interior_nodes.len(),
            nodes,
            elements,
            boundary_nodes,
            boundary_facets,
            shape,
            interior_nodes,
            interior_pos,
            boundary_pos,
            geometry,
            pattern: OnceLock::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element(&self, e: usize) -> &[usize] {
        &self.elements[e][..self.dim + 1]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.nodes[i][..self.dim]
    }

    pub fn geometry(&self, e: usize) -> &ElementGeometry {
        &self.geometry[e]
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    /// Position of `node` in `boundary_nodes`.
    pub fn boundary_index(&self, node: usize) -> Option<usize> {
        let p = self.boundary_pos[node];
        (p != usize::MAX).then_some(p)
    }

    /// Position of `node` among the interior unknowns.
    pub fn interior_index(&self, node: usize) -> Option<usize> {
        let p = self.interior_pos[node];
        (p != usize::MAX).then_some(p)
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_pos[node] != usize::MAX
    }

    /// Element centroid, with periodic unwrapping.
    pub fn centroid(&self, e: usize) -> [f64; 3] {
        let pts = element_points(self.dim, &self.nodes, &self.elements[e], self.period());
        let mut c = [0.0; 3];
        for p in pts.iter().take(self.dim + 1) {
            for k in 0..3 {
                c[k] += p[k] / (self.dim + 1) as f64;
            }
        }
        c
    }

    pub fn period(&self) -> Option<f64> {
        match self.shape {
            Shape::PeriodicSlab { lengths } => Some(lengths[0]),
            _ => None,
        }
    }

    pub fn volume(&self) -> f64 {
        self.geometry.iter().map(|g| g.volume).sum()
    }

    pub fn analytic_volume(&self) -> f64 {
        match self.shape {
            Shape::Box { lengths } | Shape::PeriodicSlab { lengths } => lengths[..self.dim].iter().product(),
            Shape::Disk { radius } => std::f64::consts::PI * radius * radius,
        }
    }

    /// Node adjacency pattern (CSR indptr, indices) including the diagonal.
    pub fn pattern(&self) -> &(Vec<usize>, Vec<usize>) {
        self.pattern.get_or_init(|| {
            let n = self.nodes.len();
            let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
            for e in 0..self.elements.len() {
                let el = self.element(e);
                for &a in el {
                    for &b in el {
                        adj[a].push(b);
                    }
                }
            }
            let mut indptr = vec![0];
            let mut indices = Vec::new();
            for row in adj.iter_mut() {
                row.sort_unstable();
                row.dedup();
                indices.extend_from_slice(row);
                indptr.push(indices.len());
            }
            (indptr, indices)
        })
    }

    /// Checks the structural invariants: unit normals, positive volumes and
    /// boundary node consistency.
    pub fn check_invariants(&self) -> Result<()> {
        for f in &self.boundary_facets {
            let len: f64 = f.normal.iter().map(|c| c * c).sum::<f64>().sqrt();
            if (len - 1.0).abs() > GEOM_TOL {
                return Err(Error::invalid("facet normal is not unit length"));
            }
        }
        if self.geometry.iter().any(|g| g.volume <= 0.0) {
            return Err(Error::invalid("non-positive element volume"));
        }
        let mut from_facets: Vec<usize> = self
            .boundary_facets
            .iter()
            .flat_map(|f| f.nodes[..self.dim].to_vec())
            .collect();
        from_facets.sort_unstable();
        from_facets.dedup();
        if from_facets != self.boundary_nodes {
            return Err(Error::invalid("boundary nodes do not match boundary facets"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let nodes: Vec<Vec<f64>> = self.nodes.iter().map(|p| p[..self.dim].to_vec()).collect();
        let elements: Vec<Vec<usize>> = self.elements.iter().map(|e| e[..self.dim + 1].to_vec()).collect();
        let facets: Vec<Value> = self
            .boundary_facets
            .iter()
            .map(|f| {
                json!({
                    "nodes": f.nodes[..self.dim].to_vec(),
                    "normal": f.normal[..self.dim].to_vec(),
                    "measure": f.measure,
                })
            })
            .collect();
        json!({
            "dimension": self.dim,
            "nodes": nodes,
            "elements": elements,
            "boundary_facets": facets,
        })
    }
}

fn element_points(dim: usize, nodes: &[[f64; 3]], el: &[usize; 4], period: Option<f64>) -> [[f64; 3]; 4] {
    let mut pts = [[0.0; 3]; 4];
    for l in 0..=dim {
        pts[l] = nodes[el[l]];
    }
    if let Some(p) = period {
        let xmax = pts[..=dim].iter().map(|q| q[0]).fold(f64::MIN, f64::max);
        for q in pts[..=dim].iter_mut() {
            if xmax - q[0] > 0.5 * p {
                q[0] += p;
            }
        }
    }
    pts
}

// Signed volume and barycentric gradients of a simplex.
fn simplex_geometry(dim: usize, pts: &[[f64; 3]; 4]) -> Result<(f64, [[f64; 3]; 4])> {
    let mut grads = [[0.0; 3]; 4];
    match dim {
        2 => {
            let (x0, y0) = (pts[0][0], pts[0][1]);
            let (a, b) = (pts[1][0] - x0, pts[1][1] - y0);
            let (c, d) = (pts[2][0] - x0, pts[2][1] - y0);
            let det = a * d - b * c;
            if det == 0.0 {
                return Err(Error::invalid("degenerate triangle"));
            }
            // Rows of J^{-T} with J = [[a, c], [b, d]].
            grads[1] = [d / det, -c / det, 0.0];
            grads[2] = [-b / det, a / det, 0.0];
            grads[0] = [-grads[1][0] - grads[2][0], -grads[1][1] - grads[2][1], 0.0];
            Ok((det / 2.0, grads))
        }
        3 => {
            let mut j = Matrix3::zeros();
            for c in 0..3 {
                for r in 0..3 {
                    j[(r, c)] = pts[c + 1][r] - pts[0][r];
                }
            }
            let det = j.determinant();
            let inv = j
                .try_inverse()
                .ok_or_else(|| Error::invalid("degenerate tetrahedron"))?;
            for l in 1..4 {
                for r in 0..3 {
                    grads[l][r] = inv[(l - 1, r)];
                }
            }
            for r in 0..3 {
                grads[0][r] = -(grads[1][r] + grads[2][r] + grads[3][r]);
            }
            Ok((det / 6.0, grads))
        }
        _ => Err(Error::invalid("dimension must be 2 or 3")),
    }
}

fn facet_normal(dim: usize, f: &[[f64; 3]]) -> ([f64; 3], f64) {
    if dim == 2 {
        let (dx, dy) = (f[1][0] - f[0][0], f[1][1] - f[0][1]);
        let len = (dx * dx + dy * dy).sqrt();
        ([dy / len, -dx / len, 0.0], len)
    } else {
        let u = [f[1][0] - f[0][0], f[1][1] - f[0][1], f[1][2] - f[0][2]];
        let v = [f[2][0] - f[0][0], f[2][1] - f[0][1], f[2][2] - f[0][2]];
        let c = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        ([c[0] / len, c[1] / len, c[2] / len], 0.5 * len)
    }
}

// Union-jack split of a structured quadrilateral grid: the diagonal
// alternates with the parity of the cell so the mesh keeps the symmetries of
// the square.
fn union_jack(nx: usize, ny: usize, idx: impl Fn(usize, usize) -> usize) -> Vec<[usize; 4]> {
    let mut els = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let a = idx(i, j);
            let b = idx(i + 1, j);
            let c = idx(i + 1, j + 1);
            let d = idx(i, j + 1);
            if (i + j) % 2 == 0 {
                els.push([a, b, c, 0]);
                els.push([a, c, d, 0]);
            } else {
                els.push([a, b, d, 0]);
                els.push([b, c, d, 0]);
            }
        }
    }
    els
}

/// Conforming simplicial mesh of the box [0, L₁]×…×[0, Lₙ].
pub fn build_box_mesh(dim: usize, lengths: &[f64], divisions: &[usize]) -> Result<Mesh> {
    if dim != 2 && dim != 3 {
        return Err(Error::invalid("dimension must be 2 or 3"));
    }
    if lengths.len() != dim || divisions.len() != dim {
        return Err(Error::invalid("lengths and divisions must have one entry per axis"));
    }
    if divisions.iter().any(|&d| d < 2) {
        return Err(Error::invalid("at least 2 divisions per axis are required"));
    }
    if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid("box lengths must be positive"));
    }
    let mut len3 = [1.0; 3];
    len3[..dim].copy_from_slice(lengths);
    if dim == 2 {
        let (nx, ny) = (divisions[0], divisions[1]);
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([lengths[0] * i as f64 / nx as f64, lengths[1] * j as f64 / ny as f64, 0.0]);
            }
        }
        let els = union_jack(nx, ny, |i, j| j * (nx + 1) + i);
        Mesh::assemble(2, nodes, els, Shape::Box { lengths: len3 })
    } else {
        let (nx, ny, nz) = (divisions[0], divisions[1], divisions[2]);
        let idx = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    nodes.push([
                        lengths[0] * i as f64 / nx as f64,
                        lengths[1] * j as f64 / ny as f64,
                        lengths[2] * k as f64 / nz as f64,
                    ]);
                }
            }
        }
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut els = Vec::with_capacity(6 * nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    for p in PERMS {
                        let mut c = [i, j, k];
                        let mut tet = [idx(c[0], c[1], c[2]), 0, 0, 0];
                        for (s, &axis) in p.iter().enumerate() {
                            c[axis] += 1;
                            tet[s + 1] = idx(c[0], c[1], c[2]);
                        }
                        els.push(tet);
                    }
                }
            }
        }
        Mesh::assemble(3, nodes, els, Shape::Box { lengths: len3 })
    }
}

/// Disk of the given radius centred at the origin, obtained by mapping a
/// union-jack grid of the square [-1, 1]² onto the disk. `divisions` is
/// rounded up to an even number so every corner cell is cut through the
/// corner.
pub fn build_disk_mesh(radius: f64, divisions: usize) -> Result<Mesh> {
    if divisions < 2 {
        return Err(Error::invalid("at least 2 divisions are required"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let m = divisions + divisions % 2;
    let mut nodes = Vec::with_capacity((m + 1) * (m + 1));
    for j in 0..=m {
        for i in 0..=m {
            let u = -1.0 + 2.0 * i as f64 / m as f64;
            let v = -1.0 + 2.0 * j as f64 / m as f64;
            let x = u * (1.0 - 0.5 * v * v).sqrt();
            let y = v * (1.0 - 0.5 * u * u).sqrt();
            nodes.push([radius * x, radius * y, 0.0]);
        }
    }
    let els = union_jack(m, m, |i, j| j * (m + 1) + i);
    Mesh::assemble(2, nodes, els, Shape::Disk { radius })
}

/// Two-dimensional slab [0, L₁) × [0, L₂], periodic in x. The boundary
/// consists of the faces y = 0 and y = L₂.
pub fn build_periodic_slab(lengths: [f64; 2], divisions: [usize; 2]) -> Result<Mesh> {
    let (nx, ny) = (divisions[0], divisions[1]);
    if nx < 4 || nx % 2 != 0 || ny < 2 {
        return Err(Error::invalid("slab needs an even x division count ≥ 4 and ≥ 2 y divisions"));
    }
    if lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("slab lengths must be positive"));
    }
    let mut nodes = Vec::with_capacity(nx * (ny + 1));
    for j in 0..=ny {
        for i in 0..nx {
            nodes.push([lengths[0] * i as f64 / nx as f64, lengths[1] * j as f64 / ny as f64, 0.0]);
        }
    }
    let els = union_jack(nx, ny, |i, j| j * nx + (i % nx));
    Mesh::assemble(
        2,
        nodes,
        els,
        Shape::PeriodicSlab {
            lengths: [lengths[0], lengths[1], 1.0],
        },
    )
}

/// Nodal scalar coefficient (γ, κ, sources, solutions).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(values: Vec<f64>) -> Self {
        ScalarField { values }
    }

    pub fn constant(mesh: &Mesh, c: f64) -> Self {
        ScalarField {
            values: vec![c; mesh.node_count()],
        }
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(&[f64]) -> f64) -> Self {
        ScalarField {
            values: (0..mesh.node_count()).map(|i| f(mesh.point(i))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        if self.values.len() != mesh.node_count() {
            return Err(Error::invalid(format!(
                "field has {} values but the mesh has {} nodes",
                self.values.len(),
                mesh.node_count()
            )));
        }
        Ok(())
    }

    /// Rejects values below `lower` or non-finite values.
    pub fn check_lower_bound(&self, lower: f64, name: &str) -> Result<()> {
        for (i, &v) in self.values.iter().enumerate() {
            if !(v >= lower) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} must be ≥ {lower} everywhere, found {v} at node {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Nodal symmetric tensor field A.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub dim: usize,
    pub values: Vec<[[f64; 3]; 3]>,
}

impl TensorField {
    pub fn identity(mesh: &Mesh) -> Self {
        let mut id = [[0.0; 3]; 3];
        for (k, row) in id.iter_mut().enumerate().take(mesh.dim) {
            row[k] = 1.0;
        }
        TensorField {
            dim: mesh.dim,
            values: vec![id; mesh.node_count()],
        }
    }

    pub fn constant(mesh: &Mesh, a: &[Vec<f64>]) -> Result<Self> {
        if a.len() != mesh.dim || a.iter().any(|r| r.len() != mesh.dim) {
            return Err(Error::invalid("tensor must be dim × dim"));
        }
        let mut m = [[0.0; 3]; 3];
        for i in 0..mesh.dim {
            for j in 0..mesh.dim {
                m[i][j] = a[i][j];
            }
        }
        let t = TensorField {
            dim: mesh.dim,
            values: vec![m; mesh.node_count()],
        };
        Ok(t)
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(&[f64]) -> [[f64; 3]; 3]) -> Self {
        TensorField {
            dim: mesh.dim,
            values: (0..mesh.node_count()).map(|i| f(mesh.point(i))).collect(),
        }
    }

    /// Verifies exact symmetry and uniform ellipticity; returns the smallest
    /// nodal eigenvalue.
    pub fn check(&self, c0: f64) -> Result<f64> {
        let mut min_eig = f64::INFINITY;
        for (i, a) in self.values.iter().enumerate() {
            for r in 0..self.dim {
                for c in 0..self.dim {
                    if a[r][c] != a[c][r] {
                        return Err(Error::invalid(format!("tensor is not symmetric at node {i}")));
                    }
                }
            }
            let e = smallest_eigenvalue(self.dim, a);
            if !(e >= c0) {
                return Err(Error::invalid(format!(
                    "tensor ellipticity violated at node {i}: smallest eigenvalue {e} < {c0}"
                )));
            }
            min_eig = min_eig.min(e);
        }
        Ok(min_eig)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .iter()
            .map(|a| smallest_eigenvalue(self.dim, a))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn smallest_eigenvalue(dim: usize, a: &[[f64; 3]; 3]) -> f64 {
    if dim == 2 {
        let (p, q, r) = (a[0][0], a[0][1], a[1][1]);
        let m = 0.5 * (p + r);
        let d = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        m - d
    } else {
        let m = Matrix3::from_fn(|r, c| a[r][c]);
        SymmetricEigen::new(m).eigenvalues.min()
    }
}

/// Values at the boundary nodes, ordered as `Mesh::boundary_nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryTrace {
    pub values: Vec<f64>,
}

impl BoundaryTrace {
    pub fn new(values: Vec<f64>) -> Self {
        BoundaryTrace { values }
    }

    pub fn zeros(mesh: &Mesh) -> Self {
        BoundaryTrace {
            values: vec![0.0; mesh.boundary_nodes.len()],
        }
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(&[f64]) -> f64) -> Self {
        BoundaryTrace {
            values: mesh.boundary_nodes.iter().map(|&i| f(mesh.point(i))).collect(),
        }
    }

    /// Trace of a nodal field.
    pub fn restrict(mesh: &Mesh, field: &ScalarField) -> Self {
        BoundaryTrace {
            values: mesh.boundary_nodes.iter().map(|&i| field.values[i]).collect(),
        }
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        if self.values.len() != mesh.boundary_nodes.len() {
            return Err(Error::invalid(format!(
                "trace has {} values but the mesh has {} boundary nodes",
                self.values.len(),
                mesh.boundary_nodes.len()
            )));
        }
        Ok(())
    }
}

/// ∫Ω f dx for the piecewise-linear interpolant of `field` (exact).
pub fn integrate(mesh: &Mesh, field: &ScalarField) -> f64 {
    let nv = (mesh.dim + 1) as f64;
    let mut s = 0.0;
    for e in 0..mesh.elements.len() {
        let mean: f64 = mesh.element(e).iter().map(|&i| field.values[i]).sum::<f64>() / nv;
        s += mesh.geometry(e).volume * mean;
    }
    s
}

/// ∫∂Ω g dS for the piecewise-linear interpolant of the trace.
pub fn boundary_integral(mesh: &Mesh, trace: &BoundaryTrace) -> f64 {
    let lumped = boundary_lumped_mass(mesh);
    lumped.iter().zip(&trace.values).map(|(w, v)| w * v).sum()
}

/// Row sums of the boundary mass matrix: ∫∂Ω λᵢ dS per boundary node.
pub fn boundary_lumped_mass(mesh: &Mesh) -> Vec<f64> {
    let mut w = vec![0.0; mesh.boundary_nodes.len()];
    let k = mesh.dim as f64;
    for f in &mesh.boundary_facets {
        for &v in f.nodes.iter().take(mesh.dim) {
            w[mesh.boundary_index(v).unwrap()] += f.measure / k;
        }
    }
    w
}

/// Trapezoidal boundary inner product ⟨a, b⟩ = Σ wᵢ aᵢ bᵢ.
pub fn boundary_inner(mesh: &Mesh, a: &BoundaryTrace, b: &BoundaryTrace) -> f64 {
    let w = boundary_lumped_mass(mesh);
    w.iter()
        .zip(a.values.iter().zip(&b.values))
        .map(|(wi, (x, y))| wi * x * y)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn two_by_two_square_counts() {
        let m = build_box_mesh(2, &[1.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(m.node_count(), 9);
        assert_eq!(m.elements.len(), 8);
        assert!((m.volume() - 1.0).abs() < 1e-14);
        assert_eq!(m.interior_node_count, 1);
        m.check_invariants().unwrap();
    }

    #[test]
    fn cube_volume() {
        let m = build_box_mesh(3, &[1.0, 1.0, 1.0], &[2, 2, 2]).unwrap();
        assert!((m.volume() - 1.0).abs() < 1e-12);
        assert_eq!(m.boundary_facets.len(), 6 * 4 * 2);
        m.check_invariants().unwrap();
    }

    #[test]
    fn perimeter_node_count() {
        let m = build_box_mesh(2, &[1.0, 1.0], &[64, 64]).unwrap();
        assert_eq!(m.boundary_nodes.len(), 4 * 64);
    }

    #[test]
    fn rejects_too_few_divisions() {
        assert!(build_box_mesh(2, &[1.0, 1.0], &[1, 4]).is_err());
        assert!(build_box_mesh(2, &[1.0, -1.0], &[4, 4]).is_err());
    }

    #[test]
    fn integrals_on_square() {
        let m = build_box_mesh(2, &[1.0, 1.0], &[8, 8]).unwrap();
        assert!((integrate(&m, &ScalarField::constant(&m, 1.0)) - 1.0).abs() < 1e-14);
        assert!((integrate(&m, &ScalarField::from_fn(&m, |p| p[0])) - 0.5).abs() < 1e-14);
        assert!((boundary_integral(&m, &BoundaryTrace::from_fn(&m, |_| 1.0)) - 4.0).abs() < 1e-14);
        assert!((boundary_integral(&m, &BoundaryTrace::from_fn(&m, |p| p[0])) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn normal_component_integrates_to_zero() {
        let m = build_box_mesh(2, &[1.0, 1.0], &[6, 6]).unwrap();
        let s: f64 = m.boundary_facets.iter().map(|f| f.normal[0] * f.measure).sum();
        assert!(s.abs() < 1e-14);
    }

    #[test]
    fn sine_product_integral() {
        let m = build_box_mesh(2, &[1.0, 1.0], &[64, 64]).unwrap();
        let f = ScalarField::from_fn(&m, |p| (PI * p[0]).sin() * (PI * p[1]).sin());
        assert!((integrate(&m, &f) - 4.0 / (PI * PI)).abs() < 2e-3);
    }

    #[test]
    fn disk_area_and_normals() {
        let m = build_disk_mesh(1.0, 32).unwrap();
        m.check_invariants().unwrap();
        assert!((m.volume() - PI).abs() < 1e-2);
        for f in &m.boundary_facets {
            let p = m.point(f.nodes[0]);
            assert!(f.normal[0] * p[0] + f.normal[1] * p[1] > 0.9);
        }
    }

    #[test]
    fn periodic_slab_has_two_faces() {
        let m = build_periodic_slab([1.0, 0.5], [8, 4]).unwrap();
        m.check_invariants().unwrap();
        assert_eq!(m.boundary_nodes.len(), 16);
        assert!((m.volume() - 0.5).abs() < 1e-14);
        assert!(m.boundary_facets.iter().all(|f| f.normal[0].abs() < 1e-14));
    }

    #[test]
    fn tensor_checks() {
        let m = build_box_mesh(2, &[1.0, 1.0], &[2, 2]).unwrap();
        let a = TensorField::constant(&m, &[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let e = a.check(0.1).unwrap();
        assert!((e - (1.5 - 1.25f64.sqrt())).abs() < 1e-14);
        let bad = TensorField::constant(&m, &[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(bad.check(0.1).is_err());
        let asym = TensorField::constant(&m, &[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(asym.check(0.1).is_err());
    }
}
