//! Sparse storage, banded Cholesky factorization and the symmetric
//! generalized eigensolvers used by the finite element operators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in rows.iter_mut() {
            row.sort_by_key(|&(j, _)| j);
            let mut last: Option<usize> = None;
            for &(j, v) in row.iter() {
                if last == Some(j) {
                    *data.last_mut().unwrap() += v;
                } else {
                    indices.push(j);
                    data.push(v);
                    last = Some(j);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            n_rows,
            n_cols,
            indptr,
            indices,
            data,
        }
    }

    /// Empty matrix with a fixed sparsity pattern.
    pub fn with_pattern(n: usize, indptr: Vec<usize>, indices: Vec<usize>) -> Self {
        let nnz = indices.len();
        Csr {
            n_rows: n,
            n_cols: n,
            indptr,
            indices,
            data: vec![0.0; nnz],
        }
    }

    /// Adds `v` at (i, j); the entry must exist in the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let row = &self.indices[self.indptr[i]..self.indptr[i + 1]];
        let k = row
            .binary_search(&j)
            .expect("entry outside the sparsity pattern");
        self.data[self.indptr[i] + k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.indices[self.indptr[i]..self.indptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.data[self.indptr[i] + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n_rows {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.data[k] * x[self.indices[k]];
            }
            y[i] = s;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec(x, &mut y);
        y
    }

    /// Sub-matrix selecting `rows` and `cols` (given as index lists).
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Csr {
        let mut col_map = vec![usize::MAX; self.n_cols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for &r in rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = col_map[self.indices[k]];
                if c != usize::MAX {
                    indices.push(c);
                    data.push(self.data[k]);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            n_rows: rows.len(),
            n_cols: cols.len(),
            indptr,
            indices,
            data,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                m[(i, self.indices[k])] += self.data[k];
            }
        }
        m
    }

    /// Half bandwidth max |i - j| over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut bw = 0;
        for i in 0..self.n_rows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                bw = bw.max(i.abs_diff(self.indices[k]));
            }
        }
        bw
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.data[self.indptr[i]..self.indptr[i + 1]].iter().sum())
            .collect()
    }
}

/// Cholesky factor of a symmetric positive definite banded matrix.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // Row i stores L[i][i-bw..=i].
    data: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &Csr) -> Result<Self> {
        if a.n_rows != a.n_cols {
            return Err(Error::solver("banded Cholesky needs a square matrix"));
        }
        let n = a.n_rows;
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            for k in a.indptr[i]..a.indptr[i + 1] {
                let j = a.indices[k];
                if j <= i {
                    data[i * w + (j + bw - i)] += a.data[k];
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = data[i * w + (j + bw - i)];
                for k in k0..j {
                    s -= data[i * w + (k + bw - i)] * data[j * w + (k + bw - j)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::solver(format!(
                            "matrix is not positive definite (pivot {i}: {s:e})"
                        )));
                    }
                    data[i * w + bw] = s.sqrt();
                } else {
                    data[i * w + (j + bw - i)] = s / data[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.data[i * w + (k + bw - i)] * x[k];
            }
            x[i] = s / self.data[i * w + bw];
        }
        for i in (0..n).rev() {
            let xi = x[i] / self.data[i * w + bw];
            x[i] = xi;
            for k in i.saturating_sub(bw)..i {
                x[k] -= self.data[i * w + (k + bw - i)] * xi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eigenpairs of the pencil (K, M) sorted ascending. Eigenvectors are
/// M-orthonormal.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Problem size below which the dense solver is used.
pub const DENSE_EIGEN_LIMIT: usize = 400;

/// Lowest `count` eigenpairs of K x = λ M x via a dense reduction.
pub fn dense_generalized(k: &DMatrix<f64>, m: &DMatrix<f64>, count: usize) -> Result<EigenPairs> {
    let n = k.nrows();
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::solver("mass matrix is not positive definite"))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::solver("singular mass factor"))?;
    let mut c = &linv * k * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lt_inv = linv.transpose();
    let take = count.min(n);
    let mut values = Vec::with_capacity(take);
    let mut vectors = Vec::with_capacity(take);
    for &idx in order.iter().take(take) {
        values.push(eig.eigenvalues[idx]);
        let y = eig.eigenvectors.column(idx);
        let x: DVector<f64> = &lt_inv * y;
        vectors.push(x.iter().copied().collect());
    }
    Ok(EigenPairs { values, vectors })
}

/// Symmetric positive definite operator pencil accessed through products
/// and a factorized K.
pub struct Pencil<'a> {
    pub k: &'a Csr,
    pub m: &'a Csr,
    pub k_factor: &'a BandedCholesky,
}

/// Block Lanczos on K⁻¹M with full M-reorthogonalization, followed by a
/// Rayleigh–Ritz projection of the pencil. Block size covers eigenvalue
/// multiplicities up to `block`.
pub fn block_lanczos(
    pencil: &Pencil,
    count: usize,
    block: usize,
    seed: u64,
    tol: f64,
) -> Result<EigenPairs> {
    let n = pencil.k.n_rows;
    let count = count.min(n);
    let block = block.max(1).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut mbasis: Vec<Vec<f64>> = Vec::new();
    let mut target = (2 * count + 4 * block).max(count + 40).min(n);
    let mut frontier: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();

    loop {
        while basis.len() < target {
            let start = basis.len();
            // Whole blocks only: truncating one breaks the block Krylov recurrence.
            for mut w in frontier.drain(..) {
                if orthonormalize(&mut w, &basis, &mbasis, pencil.m) {
                    mbasis.push(pencil.m.mul(&w));
                    basis.push(w);
                }
            }
            if basis.len() == start {
                // Invariant subspace reached; restart with fresh random vectors.
                frontier = (0..block)
                    .map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
                    .collect();
                continue;
            }
            frontier = basis[start..]
                .iter()
                .map(|v| {
                    let mut w = pencil.m.mul(v);
                    pencil.k_factor.solve_in_place(&mut w);
                    w
                })
                .collect();
        }

        let dim = basis.len();
        let kb: Vec<Vec<f64>> = basis.iter().map(|v| pencil.k.mul(v)).collect();
        let mut kr = DMatrix::zeros(dim, dim);
        let mut mr = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..=i {
                let kij = dot(&basis[i], &kb[j]);
                let mij = dot(&basis[i], &mbasis[j]);
                kr[(i, j)] = kij;
                kr[(j, i)] = kij;
                mr[(i, j)] = mij;
                mr[(j, i)] = mij;
            }
        }
        let ritz = dense_generalized(&kr, &mr, count + block)?;
        let mut values = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        let mut converged = true;
        for (idx, lam) in ritz.values.iter().enumerate().take(count) {
            let y = &ritz.vectors[idx];
            let mut x = vec![0.0; n];
            for (c, v) in y.iter().zip(&basis) {
                axpy(*c, v, &mut x);
            }
            let kx = pencil.k.mul(&x);
            let mx = pencil.m.mul(&x);
            let r: Vec<f64> = kx.iter().zip(&mx).map(|(a, b)| a - lam * b).collect();
            if norm(&r) > tol * lam.abs().max(1e-300) * norm(&mx) {
                converged = false;
            }
            values.push(*lam);
            vectors.push(x);
        }
        if converged || dim >= n {
            return Ok(EigenPairs { values, vectors });
        }
        let next = (target + target / 2).min(n);
        if next == target {
            return Err(Error::solver("block Lanczos did not converge"));
        }
        target = next;
        if frontier.is_empty() {
            frontier = (0..block)
                .map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect();
        }
    }
}

// Two-pass classical Gram–Schmidt in the M inner product. Returns false when
// the vector is (numerically) inside the current span.
fn orthonormalize(w: &mut [f64], basis: &[Vec<f64>], mbasis: &[Vec<f64>], m: &Csr) -> bool {
    let mw0 = m.mul(w);
    let n0 = dot(w, &mw0).sqrt();
    if n0 == 0.0 {
        return false;
    }
    for _ in 0..2 {
        let coeffs: Vec<f64> = mbasis.iter().map(|mv| dot(mv, w)).collect();
        for (c, v) in coeffs.iter().zip(basis) {
            axpy(-c, v, w);
        }
    }
    let mw = m.mul(w);
    let nrm = dot(w, &mw).sqrt();
    if nrm <= 1e-10 * n0 {
        return false;
    }
    for x in w.iter_mut() {
        *x /= nrm;
    }
    true
}

/// Lowest eigenpairs of K x = λ M x, dense for small problems and block
/// Lanczos otherwise.
pub fn generalized_lowest(
    k: &Csr,
    m: &Csr,
    k_factor: &BandedCholesky,
    count: usize,
    seed: u64,
) -> Result<EigenPairs> {
    let n = k.n_rows;
    if n <= DENSE_EIGEN_LIMIT || 3 * count >= n {
        return dense_generalized(&k.to_dense(), &m.to_dense(), count);
    }
    block_lanczos(&Pencil { k, m, k_factor }, count, 6, seed, 1e-10)
}

/// Solves the small dense least squares problem min ‖A x − b‖ with an SVD
/// truncated at relative threshold `rcond`.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut x = DMatrix::zeros(a.ncols(), b.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rcond * smax && s > 0.0 {
            let ub = u.column(k).transpose() * b;
            x += vt.row(k).transpose() * (ub / s);
        }
    }
    x
}
