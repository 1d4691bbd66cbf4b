//! Dense row-major `f64` matrices and the handful of kernels the optimizers
//! need: products, norms, Hadamard operations and a deterministic thin SVD.
//!
//! The SVD is a one-sided cyclic Jacobi (Hestenes) iteration run on the
//! taller orientation of the input. Sweeps visit column pairs in a fixed
//! order, so identical inputs always yield identical bytes.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative threshold below which a Jacobi rotation is skipped.
const JACOBI_TOL: f64 = 1e-12;
/// Hard cap on the number of Jacobi sweeps.
const MAX_SWEEPS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyDims { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("clip radius must be positive, got {0}")]
    BadRadius(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::eye(n, n)
    }

    /// First `cols` columns of the `rows`-dimensional identity.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyDims { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Matrix with IID standard normal entries.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    /// Columns `0..k` as a new matrix.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        assert!(k <= self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for i in 0..self.rows {
            out.data[i * k..(i + 1) * k].copy_from_slice(&self.row(i)[..k]);
        }
        out
    }

    /// Rejects NaN/Inf, naming the first offending index.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(LinalgError::NonFinite {
                row: idx / self.cols,
                col: idx % self.cols,
                value: self.data[idx],
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (n, m) = (self.rows, rhs.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "t_matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (n, m) = (self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, m);
        for k in 0..self.rows {
            let b_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.data[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn hadamard_div(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "hadamard_div", |a, b| a / b)
    }

    /// `self += alpha * rhs`
    pub fn axpy(&mut self, alpha: f64, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::ShapeMismatch {
                op: "axpy",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.s[0])
}

/// Rescales `g` onto the Frobenius ball of radius `radius` if it lies outside.
pub fn clip_frobenius(g: &Matrix, radius: f64) -> Result<Matrix> {
    if !(radius > 0.0) {
        return Err(LinalgError::BadRadius(radius));
    }
    let norm = g.frobenius_norm();
    if norm <= radius {
        Ok(g.clone())
    } else {
        Ok(g.scale(radius / norm))
    }
}

/// Thin SVD `A = U diag(S) Vᵀ` with `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.v.transpose()).expect("consistent svd factors")
    }
}

/// Deterministic thin SVD by one-sided cyclic Jacobi.
///
/// Each column of `U` is signed so that its largest-magnitude entry is
/// positive (lowest row index wins ties); the matching column of `V` is
/// flipped with it. Columns belonging to zero singular values are completed
/// to an orthonormal set from the standard basis.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows == 0 || a.cols == 0 {
        return Err(LinalgError::EmptyDims {
            rows: a.rows,
            cols: a.cols,
        });
    }
    a.ensure_finite()?;
    if a.cols > a.rows {
        let t = jacobi_tall(&a.transpose());
        let mut out = SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    } else {
        let mut out = jacobi_tall(a);
        fix_signs(&mut out);
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Hestenes iteration for `rows >= cols`.
fn jacobi_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&w[i], &w[i]);
                let beta = dot(&w[j], &w[j]);
                let gamma = dot(&w[i], &w[j]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep their original column order
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * (m.max(n) as f64) * f64::EPSILON;
    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        vm.set_column(k, &v[j]);
        if sigma > cutoff && sigma > 0.0 {
            let col: Vec<f64> = w[j].iter().map(|x| x / sigma).collect();
            u.set_column(k, &col);
            s.push(sigma);
        } else {
            s.push(0.0);
            missing.push(k);
        }
    }
    if !missing.is_empty() {
        complete_orthonormal(&mut u, &missing);
    }
    SvdResult { u, s, v: vm }
}

/// Fills the listed columns of `u` with standard-basis directions
/// orthogonalized against every other column.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let m = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0usize;
    for &k in missing {
        loop {
            assert!(candidate < m, "cannot complete orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &c in &filled {
                    let col = u.column(c);
                    let proj = dot(&col, &e);
                    for (x, y) in e.iter_mut().zip(&col) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                let col: Vec<f64> = e.iter().map(|x| x / norm).collect();
                u.set_column(k, &col);
                filled.push(k);
                break;
            }
        }
    }
}

fn fix_signs(out: &mut SvdResult) {
    for k in 0..out.u.cols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..out.u.rows() {
            let a = out.u[(i, k)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if out.u[(best, k)] < 0.0 {
            for i in 0..out.u.rows() {
                out.u[(i, k)] = -out.u[(i, k)];
            }
            for i in 0..out.v.rows() {
                out.v[(i, k)] = -out.v[(i, k)];
            }
        }
    }
}

/// Count of singular values above `rel_tol * σ₁`. Zero for the zero matrix.
pub fn numerical_rank(a: &Matrix, rel_tol: f64) -> Result<usize> {
    let s = svd(a)?.s;
    Ok(rank_from_singular_values(&s, rel_tol))
}

pub fn rank_from_singular_values(s: &[f64], rel_tol: f64) -> usize {
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&x| x > rel_tol * top).count(),
        _ => 0,
    }
}

/// Modified Gram–Schmidt, applied twice. Returns `None` if the columns are
/// numerically dependent.
pub fn orthonormalize_columns(a: &Matrix) -> Option<Matrix> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    for j in 0..n {
        let original = dot(&cols[j], &cols[j]).sqrt();
        for _ in 0..2 {
            for i in 0..j {
                let proj = dot(&cols[i], &cols[j]);
                let (lo, hi) = cols.split_at_mut(j);
                for (x, y) in hi[0].iter_mut().zip(&lo[i]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        if !(norm > 1e-10 * original.max(f64::MIN_POSITIVE)) {
            return None;
        }
        for x in cols[j].iter_mut() {
            *x /= norm;
        }
    }
    let mut out = Matrix::zeros(m, n);
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    Some(out)
}
