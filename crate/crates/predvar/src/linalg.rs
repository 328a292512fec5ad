//! Dense row-major `f64` matrices with the symmetric-positive-definite solve
//! used by every kernel expression in this crate.
//!
//! All gram matrices and their inverse applications go through [`solve_spd`],
//! which symmetrizes its input, adds a diagonal jitter scaled by the mean
//! diagonal, factorizes with Cholesky and polishes the solution with one step
//! of iterative refinement.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("matrix is not symmetric within tolerance (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e}); raise the jitter or shrink the dataset")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

/// Relative asymmetry admitted by [`solve_spd`] before rejecting its input.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Default diagonal jitter, relative to the mean diagonal of the gram matrix.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Single column as an `n x 1` matrix.
    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, other.rows, self.cols, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean_diag(&self) -> f64 {
        let n = self.rows.min(self.cols);
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64
    }

    /// `(M + M^T) / 2` for square matrices.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols, "symmetrized requires a square matrix");
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                rhs.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                rhs.data.as_ptr(),
                rhs.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                rhs.cols as isize,
                1,
            );
        }
        out
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_nt inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                rhs.rows,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                rhs.data.as_ptr(),
                1,
                rhs.cols as isize,
                0.0,
                out.data.as_mut_ptr(),
                rhs.rows as isize,
                1,
            );
        }
        out
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "matmul_tn inner dimensions must agree");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        unsafe {
            matrixmultiply::dgemm(
                self.cols,
                self.rows,
                rhs.cols,
                1.0,
                self.data.as_ptr(),
                1,
                self.cols as isize,
                rhs.data.as_ptr(),
                rhs.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                rhs.cols as isize,
                1,
            );
        }
        out
    }

    /// `self * v` for a vector.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

fn max_abs(m: &Matrix) -> f64 {
    m.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Lower-triangular Cholesky factor of a symmetric matrix, in place.
fn cholesky(a: &mut Matrix) -> Result<(), LinalgError> {
    let n = a.rows;
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let l = a.get(j, k);
            d -= l * l;
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        a.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            // s -= dot(L[i, :j], L[j, :j])
            let (ri, rj) = (i * n, j * n);
            for k in 0..j {
                s -= a.data[ri + k] * a.data[rj + k];
            }
            a.set(i, j, s / d);
        }
    }
    // zero the strict upper triangle so the factor is self-describing
    for i in 0..n {
        for j in (i + 1)..n {
            a.set(i, j, 0.0);
        }
    }
    Ok(())
}

fn chol_solve_in_place(l: &Matrix, b: &mut [f64]) {
    let n = l.rows;
    debug_assert_eq!(b.len(), n);
    // forward substitute L y = b
    for i in 0..n {
        let mut s = b[i];
        let row = &l.data[i * n..i * n + i];
        for (k, lik) in row.iter().enumerate() {
            s -= lik * b[k];
        }
        b[i] = s / l.get(i, i);
    }
    // back substitute L^T x = y
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * b[k];
        }
        b[i] = s / l.get(i, i);
    }
}

/// Cholesky factorization of `sym(a) + jitter * mean(diag(a)) * I`, reusable
/// across many right-hand sides of the same gram matrix.
pub struct SpdSolver {
    l: Matrix,
    shifted: Matrix,
}

impl SpdSolver {
    pub fn new(a: &Matrix, jitter: f64) -> Result<Self, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "solve_spd needs a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let scale = max_abs(a).max(f64::MIN_POSITIVE);
        let mut asym = 0.0_f64;
        for i in 0..a.rows {
            for j in (i + 1)..a.cols {
                asym = asym.max((a.get(i, j) - a.get(j, i)).abs());
            }
        }
        let rel_asym = asym / scale;
        if rel_asym > SYMMETRY_TOL {
            return Err(LinalgError::NotSymmetric(rel_asym));
        }
        let mut shifted = a.symmetrized();
        let lambda = jitter * shifted.mean_diag();
        if lambda != 0.0 {
            for i in 0..shifted.rows {
                let v = shifted.get(i, i) + lambda;
                shifted.set(i, i, v);
            }
        }
        let mut l = shifted.clone();
        cholesky(&mut l)?;
        Ok(Self { l, shifted })
    }

    /// Solves `(sym(a) + jitter*mean_diag*I) x = b` column by column with one
    /// step of iterative refinement.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix, LinalgError> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(LinalgError::ShapeMismatch(format!(
                "rhs has {} rows, expected {n}",
                b.rows
            )));
        }
        let mut x = Matrix::zeros(n, b.cols);
        let mut col = vec![0.0; n];
        let mut resid = vec![0.0; n];
        for j in 0..b.cols {
            for i in 0..n {
                col[i] = b.get(i, j);
            }
            chol_solve_in_place(&self.l, &mut col);
            // one refinement pass: r = b - A x; x += A^-1 r
            for i in 0..n {
                resid[i] = b.get(i, j) - dot(self.shifted.row(i), &col);
            }
            chol_solve_in_place(&self.l, &mut resid);
            for i in 0..n {
                col[i] += resid[i];
                x.set(i, j, col[i]);
            }
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NotPositiveDefinite { pivot: 0, value: f64::NAN });
        }
        Ok(x)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let col = Matrix::column(b.to_vec());
        Ok(self.solve(&col)?.into_vec())
    }
}

/// Solves `(sym(a) + jitter * mean(diag(a)) * I) x = b` through a Cholesky
/// factorization.
///
/// `jitter` is relative to the mean diagonal of `a`; pass
/// [`DEFAULT_JITTER`] unless a caller has reason to raise it.
pub fn solve_spd(a: &Matrix, b: &Matrix, jitter: f64) -> Result<Matrix, LinalgError> {
    SpdSolver::new(a, jitter)?.solve(b)
}

/// Entrywise arithmetic mean of equally shaped matrices; square results are
/// symmetrized. Accumulation is sequential in input order so parallel callers
/// stay deterministic.
pub fn sym_mean(samples: &[Matrix]) -> Result<Matrix, LinalgError> {
    let first = samples
        .first()
        .ok_or_else(|| LinalgError::ShapeMismatch("sym_mean needs at least one sample".into()))?;
    let (r, c) = (first.rows, first.cols);
    let mut acc = Matrix::zeros(r, c);
    for s in samples {
        if s.rows != r || s.cols != c {
            return Err(LinalgError::ShapeMismatch(format!(
                "sample {}x{} does not match {r}x{c}",
                s.rows, s.cols
            )));
        }
        for (a, v) in acc.data.iter_mut().zip(s.data.iter()) {
            *a += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for a in acc.data.iter_mut() {
        *a *= inv;
    }
    if r == c {
        acc = acc.symmetrized();
    }
    Ok(acc)
}
