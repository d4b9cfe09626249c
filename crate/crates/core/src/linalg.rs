//! Sparse storage and the symmetric solvers used by the fine and local problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Compressed sparse row matrix. Column indices are sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n x n` matrix from `(row, col, value)` triplets, summing duplicates.
    ///
    /// Duplicates are summed in the order they appear in `triplets`, so the result
    /// is bit-reproducible for a fixed input order.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        // stable bucket by row
        let mut next = counts.clone();
        let mut bucket: Vec<(usize, f64)> = vec![(0, 0.0); triplets.len()];
        for &(r, c, v) in triplets {
            bucket[next[r]] = (c, v);
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..n {
            let row = &mut bucket[counts[r]..counts[r + 1]];
            row.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut s = 0.0;
                while k < row.len() && row[k].0 == c {
                    s += row[k].1;
                    k += 1;
                }
                col_idx.push(c);
                values.push(s);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[a..b].binary_search(&j) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.get(i, i))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        self.mul_vec_into(x.as_slice(), y.as_mut_slice());
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// `self * b` for a dense right-hand side block.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n);
        let mut out = DMatrix::zeros(self.n, b.ncols());
        for c in 0..b.ncols() {
            let col = b.column(c);
            let src = col.as_slice();
            let mut dst = out.column_mut(c);
            let dst = dst.as_mut_slice();
            self.mul_vec_into(src, dst);
        }
        out
    }

    /// `xᵀ A x`
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let mut r = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                r += self.values[k] * x[self.col_idx[k]];
            }
            s += x[i] * r;
        }
        s
    }

    /// `xᵀ A y`
    pub fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let mut r = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                r += self.values[k] * y[self.col_idx[k]];
            }
            s += x[i] * r;
        }
        s
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &CsrMatrix, b: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let mut trip = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                trip.push((i, j, a * v));
            }
            for (j, v) in other.row(i) {
                trip.push((i, j, b * v));
            }
        }
        CsrMatrix::from_triplets(self.n, &trip)
    }

    pub fn scaled(&self, c: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Principal submatrix on the given (sorted or unsorted) index list.
    pub fn principal_submatrix(&self, idx: &[usize]) -> CsrMatrix {
        let mut pos = vec![usize::MAX; self.n];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
        }
        let mut trip = Vec::new();
        for (k, &i) in idx.iter().enumerate() {
            for (j, v) in self.row(i) {
                if pos[j] != usize::MAX {
                    trip.push((k, pos[j], v));
                }
            }
        }
        CsrMatrix::from_triplets(idx.len(), &trip)
    }

    /// Dense block `self[rows, cols]`.
    pub fn dense_block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let mut pos = vec![usize::MAX; self.n];
        for (k, &j) in cols.iter().enumerate() {
            pos[j] = k;
        }
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                if pos[j] != usize::MAX {
                    out[(r, pos[j])] = v;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0;
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                b = b.max(i.abs_diff(j));
            }
        }
        b
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }
}

/// Cholesky factorization `A = L Lᵀ` of a symmetric positive definite band matrix.
///
/// Row-major grid numbering keeps the P1 stiffness and mass matrices banded with
/// half-bandwidth close to the number of nodes per grid row, so fill stays inside
/// the band.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // row i holds L[i, i-bw ..= i] at offsets 0..=bw (offset bw is the diagonal)
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    l[i * w + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = l[i * w + (j + bw - i)];
                for k in k0..j {
                    s -= l[i * w + (k + bw - i)] * l[j * w + (k + bw - j)];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::numerical(format!(
                            "matrix not positive definite at pivot {i} (value {s:.3e})"
                        )));
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + (j + self.bw - i)]
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.at(i, k) * x[k];
            }
            x[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..(i + bw + 1).min(n) {
                s -= self.at(k, i) * x[k];
            }
            x[i] = s / self.at(i, i);
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    /// `Lᵀ X` for a dense block `X`; columns of the result have Euclidean norms equal
    /// to the `A`-norms of the columns of `X`.
    pub fn mul_lt_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut out = DMatrix::zeros(n, x.ncols());
        for c in 0..x.ncols() {
            for j in 0..n {
                let mut s = 0.0;
                for i in j..(j + bw + 1).min(n) {
                    s += self.at(i, j) * x[(i, c)];
                }
                out[(j, c)] = s;
            }
        }
        out
    }
}

/// Jacobi-preconditioned conjugate gradients. Returns the iterate and the iteration count.
pub fn pcg(
    a: &CsrMatrix,
    b: &DVector<f64>,
    x0: Option<&DVector<f64>>,
    rtol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let n = a.dim();
    let bnorm = b.norm();
    let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
    if bnorm == 0.0 {
        return Ok((DVector::zeros(n), 0));
    }
    let dinv = a.diagonal().map(|d| 1.0 / d);
    let mut r = b - a.mul_vec(&x);
    let mut z = r.component_mul(&dinv);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut ap = DVector::zeros(n);
    for it in 0..max_iter {
        if r.norm() <= rtol * bnorm {
            return Ok((x, it));
        }
        a.mul_vec_into(p.as_slice(), ap.as_mut_slice());
        let alpha = rz / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = r.component_mul(&dinv);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    let res = r.norm() / bnorm;
    if res <= rtol {
        Ok((x, max_iter))
    } else {
        Err(Error::NoConvergence { iterations: max_iter, residual: res })
    }
}

/// Settings for choosing between direct and iterative fine-grid solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Systems with at most this many unknowns are factored; larger ones use PCG.
    pub direct_max_dofs: usize,
    pub rtol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { direct_max_dofs: 40_000, rtol: 1e-10, max_iter: 20_000 }
    }
}

/// A reusable solver for one SPD matrix.
#[derive(Debug, Clone)]
pub enum SpdSolver {
    Direct(BandedCholesky),
    Iterative { matrix: CsrMatrix, rtol: f64, max_iter: usize },
}

impl SpdSolver {
    pub fn new(a: &CsrMatrix, settings: &SolverSettings) -> Result<Self> {
        if a.dim() <= settings.direct_max_dofs {
            Ok(SpdSolver::Direct(BandedCholesky::factor(a)?))
        } else {
            Ok(SpdSolver::Iterative {
                matrix: a.clone(),
                rtol: settings.rtol,
                max_iter: settings.max_iter,
            })
        }
    }

    pub fn solve(&self, b: &DVector<f64>, guess: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        match self {
            SpdSolver::Direct(ch) => Ok(ch.solve(b)),
            SpdSolver::Iterative { matrix, rtol, max_iter } => {
                pcg(matrix, b, guess, *rtol, *max_iter).map(|(x, _)| x)
            }
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues ascending; ties keep the solver's
/// original column order.
pub fn symmetric_eigen_ascending(a: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = nalgebra::SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Flips each column so its entry of largest magnitude is positive (first one on ties).
pub fn fix_column_signs(v: &mut DMatrix<f64>) {
    for c in 0..v.ncols() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..v.nrows() {
            let a = v[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if v[(best, c)] < 0.0 {
            v.column_mut(c).neg_mut();
        }
    }
}

/// Generalized symmetric-definite eigenproblem `K x = λ B x`, eigenvalues ascending,
/// eigenvectors `B`-orthonormal.
pub fn generalized_eigen(k: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = nalgebra::Cholesky::new(b.clone())
        .ok_or_else(|| Error::numerical("weight matrix of the spectral problem is not positive definite"))?;
    let l = chol.l();
    // C = L⁻¹ K L⁻ᵀ
    let linv_k = l
        .solve_lower_triangular(k)
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    let c = l
        .solve_lower_triangular(&linv_k.transpose())
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    let c = (&c + c.transpose()) * 0.5;
    let (vals, y) = symmetric_eigen_ascending(c);
    let x = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    // one pass of B-reorthonormalization: x ← x L_G⁻ᵀ with G = xᵀ B x = L_G L_Gᵀ
    let g = x.transpose() * b * &x;
    let g = (&g + g.transpose()) * 0.5;
    let x = match nalgebra::Cholesky::new(g) {
        Some(c) => c
            .l()
            .solve_lower_triangular(&x.transpose())
            .map(|t| t.transpose())
            .unwrap_or(x),
        None => x,
    };
    Ok((vals, x))
}
