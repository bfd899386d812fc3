//! Dense matrix primitives: a row-major [`Matrix`], a cyclic-Jacobi symmetric
//! eigensolver, standardization and whitening.
//!
//! Everything here is generic over [`Real`] so the same code serves `f32`
//! and `f64` callers.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, Index, IndexMut, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{invalid_arg, Error, Result};

/// Floating-point scalar used by the generic numeric code.
pub trait Real:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    /// Conversion from a count.
    fn n(v: usize) -> Self {
        Self::from_usize(v).expect("count representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid_arg!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid_arg!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid_arg!("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(invalid_arg!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        Self::from_fn(self.rows, k, |r, c| self[(r, c)])
    }

    /// Horizontal concatenation.
    pub fn hstack(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(invalid_arg!("hstack row-count mismatch"));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(invalid_arg!("shape mismatch in subtraction"));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn column_means(&self) -> Vec<T> {
        let mut means = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = T::n(self.rows.max(1));
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Sample covariance (denominator `rows - 1`) of the columns.
    pub fn covariance(&self) -> Result<Self> {
        if self.rows < 2 {
            return Err(invalid_arg!("covariance needs at least 2 rows"));
        }
        let means = self.column_means();
        let d = self.cols;
        let mut cov = Self::zeros(d, d);
        let mut centered = vec![T::zero(); d];
        for row in self.iter_rows() {
            for ((c, &v), &m) in centered.iter_mut().zip(row).zip(&means) {
                *c = v - m;
            }
            for i in 0..d {
                let ci = centered[i];
                if ci == T::zero() {
                    continue;
                }
                let out = &mut cov.data[i * d..(i + 1) * d];
                for j in i..d {
                    out[j] += ci * centered[j];
                }
            }
        }
        let denom = T::n(self.rows - 1);
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(cov)
    }

    /// Maximum absolute entry, zero for empty matrices.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Eigenpairs of a symmetric matrix: values sorted descending, vectors as
/// the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

impl<T: Real> EigenDecomposition<T> {
    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.values.len();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * self.values[k] * self.vectors[(j, k)])
                .sum()
        })
    }

    /// Number of eigenvalues above `rel_tol * max(|lambda|)`.
    pub fn numerical_rank(&self, rel_tol: T) -> usize {
        let top = self.values.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        if top == T::zero() {
            return 0;
        }
        self.values.iter().filter(|&&v| v > rel_tol * top).count()
    }
}

fn symmetry_tolerance<T: Real>(a: &Matrix<T>) -> T {
    let base = T::c(1e-9).max(T::epsilon() * T::c(64.0));
    base * a.max_abs().max(T::one())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvectors are normalized so their largest-magnitude entry is positive.
pub fn eigh_symmetric<T: Real>(a: &Matrix<T>) -> Result<EigenDecomposition<T>> {
    let n = a.rows();
    if n != a.cols() {
        return Err(invalid_arg!("eigh needs a square matrix, got {:?}", a.shape()));
    }
    let tol = symmetry_tolerance(a);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return Err(invalid_arg!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }

    let mut m = Matrix::from_fn(n, n, |i, j| (a[(i, j)] + a[(j, i)]) * T::c(0.5));
    let mut v = Matrix::<T>::identity(n);
    let scale = m.frobenius_norm();
    let eps = T::epsilon();

    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<T>()
            .sqrt();
        if off <= eps * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::c(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values: Vec<T> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for k in 0..n {
            if v[(k, src)].abs() > v[(pivot, src)].abs() {
                pivot = k;
            }
        }
        let sign = if v[(pivot, src)] < T::zero() { -T::one() } else { T::one() };
        for k in 0..n {
            vectors[(k, dst)] = sign * v[(k, src)];
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Cosine of the angle between two vectors.
pub fn cosine_similarity<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(invalid_arg!("length mismatch {} vs {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nv = v.iter().map(|&a| a * a).sum::<T>().sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::DegenerateInput("zero-norm vector".into()));
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    Ok((dot / (nu * nv)).max(-T::one()).min(T::one()))
}

/// Column standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Columns with population std at or below this are treated as constant.
pub const CONSTANT_COLUMN_EPS: f64 = 1e-12;

impl<T: Real> ColumnStats<T> {
    /// Population mean/std per column; constant columns get std 1.
    pub fn fit(x: &Matrix<T>) -> Self {
        let mean = x.column_means();
        let mut var = vec![T::zero(); x.cols()];
        for row in x.iter_rows() {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let n = T::n(x.rows().max(1));
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > T::c(CONSTANT_COLUMN_EPS) {
                    sd
                } else {
                    T::one()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.mean.len() {
            return Err(invalid_arg!(
                "expected {} columns, got {}",
                self.mean.len(),
                x.cols()
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, &m), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Standardizes each column to zero mean and unit population std.
pub fn standardize<T: Real>(x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Vec<T>)> {
    if x.rows() < 2 {
        return Err(invalid_arg!("standardize needs at least 2 rows"));
    }
    let stats = ColumnStats::fit(x);
    let out = stats.apply(x)?;
    Ok((out, stats.mean, stats.std))
}

/// Whitens centered data to `k` dimensions.
///
/// Returns the whitened data and the `cols x k` whitening matrix `W` such that
/// `x W` has identity sample covariance.
pub fn whiten<T: Real>(x: &Matrix<T>, k: usize) -> Result<(Matrix<T>, Matrix<T>)> {
    let limit = x.rows().saturating_sub(1).min(x.cols());
    if k == 0 || k > limit {
        return Err(invalid_arg!("whitening dimension {k} outside 1..={limit}"));
    }
    let cov = x.covariance()?;
    let eig = eigh_symmetric(&cov)?;
    let floor = T::epsilon() * eig.values[0].abs().max(T::min_positive_value());
    if eig.values[k - 1] <= floor {
        return Err(Error::DegenerateInput(format!(
            "covariance has rank below the requested whitening dimension {k}"
        )));
    }
    let w = Matrix::from_fn(x.cols(), k, |i, j| eig.vectors[(i, j)] / eig.values[j].sqrt());
    let out = x.matmul(&w)?;
    Ok((out, w))
}
