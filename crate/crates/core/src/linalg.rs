//! Dense real linear algebra: the matrix type used throughout the crate,
//! SVD, the Moore-Penrose inverse, Kronecker products, row-major
//! vectorization and the generalized absolute determinant.
//!
//! Factorizations are delegated to `faer` (built without its thread pool, so
//! every result is a deterministic function of its inputs). The small
//! kernels that feed network evaluation (`dot`, [`Matrix::mul_rows`]) are
//! hand-written so that one sample gives bit-identical results whether it is
//! evaluated alone or inside a batch.

use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("matrix must be non-empty")]
    Empty,
    #[error("numerical failure: decomposition of a {rows}x{cols} matrix did not converge")]
    NoConvergence { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LinalgError::NonFinite { index, value: data[index] }),
        None => Ok(()),
    }
}

/// Dense row-major matrix with finite entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = LinalgError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix without the finiteness check. Callers must guarantee
    /// the length; non-finite values may only arise from overflow and are
    /// screened where it matters (snapshot generation).
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from nested rows, which must all have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::Shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Copies the rows `range` into a new matrix.
    pub fn row_block(&self, range: std::ops::Range<usize>) -> Matrix {
        assert!(range.end <= self.rows, "row range out of bounds");
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Matrix::from_vec_unchecked(range.len(), self.cols, data)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|v| v * alpha).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "subtract", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape(format!(
                "cannot {what} {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        if self.is_empty() || other.is_empty() {
            return Ok(Matrix::zeros(self.rows, other.cols));
        }
        Ok(Matrix::from_faer(self.as_faer() * other.as_faer()))
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by a vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Applies `self` to every row of `batch`: returns the matrix whose row
    /// `s` is `self · batch.row(s)`. Each entry is an independent [`dot`],
    /// so the result for a sample does not depend on the batch it sits in.
    pub fn mul_rows(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols != self.cols {
            return Err(LinalgError::Shape(format!(
                "cannot apply a {}x{} matrix to samples of length {}",
                self.rows, self.cols, batch.cols
            )));
        }
        let (r, n) = (self.rows, batch.rows);
        let mut out = vec![0.0; n * r];
        mul_rows_dispatch(self, batch, &mut out);
        Ok(Matrix::from_vec_unchecked(n, r, out))
    }

    pub(crate) fn as_faer(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    pub(crate) fn from_faer(m: impl AsMatRef) -> Matrix {
        let m = m.as_mat_ref();
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// Anything viewable as a faer matrix reference.
pub(crate) trait AsMatRef {
    fn as_mat_ref(&self) -> MatRef<'_, f64>;
}

impl AsMatRef for Mat<f64> {
    fn as_mat_ref(&self) -> MatRef<'_, f64> {
        self.as_ref()
    }
}

impl AsMatRef for MatRef<'_, f64> {
    fn as_mat_ref(&self) -> MatRef<'_, f64> {
        *self
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = self.row(i);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.6}")).collect();
            let more = if self.cols > 8 { ", ..." } else { "" };
            writeln!(f, "  [{}{more}]", shown.join(", "))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// Finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = LinalgError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Vec<f64> {
        v.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Inner product with a fixed summation order (eight interleaved partial
/// sums, then the tail).
///
/// The kernels below are compiled once per instruction set and selected at
/// run time. All variants perform the same additions and multiplications in
/// the same order (no fused multiply-add), so results are bitwise identical
/// whichever one runs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    dot_portable(a, b)
}

#[inline(always)]
fn dot_portable(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    reduce8(acc) + tail
}

/// Four dot products sharing `w`; each result is bitwise equal to `dot`.
#[inline(always)]
fn dot4(w: &[f64], xs: [&[f64]; 4]) -> [f64; 4] {
    let mut acc = [[0.0f64; 8]; 4];
    let chunks = w.len() / 8;
    for c in 0..chunks {
        let wc = &w[c * 8..c * 8 + 8];
        for (acc, x) in acc.iter_mut().zip(xs) {
            let xc = &x[c * 8..c * 8 + 8];
            for l in 0..8 {
                acc[l] += wc[l] * xc[l];
            }
        }
    }
    let mut out = [0.0; 4];
    for (k, x) in xs.iter().enumerate() {
        let mut tail = 0.0;
        for j in chunks * 8..w.len() {
            tail += w[j] * x[j];
        }
        out[k] = reduce8(acc[k]) + tail;
    }
    out
}

/// Body of [`Matrix::mul_rows`]: `out[s * rows + o] = dot(w.row(o), x.row(s))`.
#[inline(always)]
fn mul_rows_body(w: &Matrix, batch: &Matrix, out: &mut [f64]) {
    let (r, n) = (w.rows, batch.rows);
    // Blocks of samples keep the working set cache-resident while each
    // weight row streams through once per block.
    const SAMPLE_BLOCK: usize = 16;
    for s0 in (0..n).step_by(SAMPLE_BLOCK) {
        let s1 = (s0 + SAMPLE_BLOCK).min(n);
        for o in 0..r {
            let wr = w.row(o);
            let mut s = s0;
            while s + 4 <= s1 {
                let d = dot4(wr, [batch.row(s), batch.row(s + 1), batch.row(s + 2), batch.row(s + 3)]);
                for (k, v) in d.into_iter().enumerate() {
                    out[(s + k) * r + o] = v;
                }
                s += 4;
            }
            for s in s..s1 {
                out[s * r + o] = dot_portable(wr, batch.row(s));
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn mul_rows_avx512(w: &Matrix, batch: &Matrix, out: &mut [f64]) {
    mul_rows_body(w, batch, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn mul_rows_avx2(w: &Matrix, batch: &Matrix, out: &mut [f64]) {
    mul_rows_body(w, batch, out)
}

fn mul_rows_dispatch(w: &Matrix, batch: &Matrix, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at run time.
            return unsafe { mul_rows_avx512(w, batch, out) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { mul_rows_avx2(w, batch, out) };
        }
    }
    mul_rows_body(w, batch, out)
}

#[inline(always)]
fn reduce8(a: [f64; 8]) -> f64 {
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))
}

/// Full singular value decomposition `m = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×m orthogonal factor.
    pub u: Matrix,
    /// min(m, n) values, non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// n×n orthogonal factor, transposed.
    pub vt: Matrix,
}

impl SvdResult {
    /// Rebuilds `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows(), self.vt.rows());
        let mut us = Matrix::zeros(m, n);
        for i in 0..m {
            for (k, &s) in self.singular_values.iter().enumerate() {
                us[(i, k)] = self.u[(i, k)] * s;
            }
        }
        us.matmul(&self.vt).expect("factor shapes are consistent")
    }
}

fn require_non_empty(m: &Matrix) -> Result<()> {
    if m.is_empty() {
        Err(LinalgError::Empty)
    } else {
        Ok(())
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    require_non_empty(m)?;
    let (rows, cols) = m.shape();
    let dec = m.as_faer().svd().map_err(|_| LinalgError::NoConvergence { rows, cols })?;
    Ok(SvdResult {
        u: Matrix::from_faer(dec.U()),
        singular_values: dec.S().column_vector().iter().copied().collect(),
        vt: Matrix::from_faer(dec.V().transpose()),
    })
}

/// Singular values only, non-increasing.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    require_non_empty(m)?;
    let (rows, cols) = m.shape();
    m.as_faer().singular_values().map_err(|_| LinalgError::NoConvergence { rows, cols })
}

/// Default rank tolerance `max(rows, cols) · ε · σ_max`.
pub fn default_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Moore-Penrose inverse through the thin SVD: singular values at or below
/// `tol` (default [`default_tolerance`]) are treated as zero.
pub fn pinv(m: &Matrix, tol: Option<f64>) -> Result<Matrix> {
    require_non_empty(m)?;
    let (rows, cols) = m.shape();
    let dec = m.as_faer().thin_svd().map_err(|_| LinalgError::NoConvergence { rows, cols })?;
    let s = dec.S().column_vector();
    let sigma_max = if s.nrows() > 0 { s[0] } else { 0.0 };
    let tol = tol.unwrap_or_else(|| default_tolerance(rows, cols, sigma_max));
    let (u, v) = (dec.U(), dec.V());
    let rank = s.iter().take_while(|&&x| x > tol).count();
    // X = V_r · Σ_r⁻¹ · U_rᵀ
    let mut vs = Mat::<f64>::zeros(cols, rank);
    for k in 0..rank {
        let inv = 1.0 / s[k];
        for i in 0..cols {
            vs[(i, k)] = v[(i, k)] * inv;
        }
    }
    if rank == 0 {
        return Ok(Matrix::zeros(cols, rows));
    }
    Ok(Matrix::from_faer(&vs * u.get(.., ..rank).transpose()))
}

/// Minimum-norm least-squares solution of `K · X = Y`.
#[derive(Debug, Clone)]
pub struct RightSolve {
    pub k: Matrix,
    /// Number of singular values of `X` above the tolerance.
    pub rank: usize,
    pub tolerance: f64,
    pub sigma_max: f64,
    /// Smallest singular value that was kept (0 when the rank is 0).
    pub sigma_min_kept: f64,
}

/// Solves `K · X ≈ Y` for `K = Y · X⁺`, where the columns of `X` and `Y` are
/// the rows of `xs` (N×n) and `ys` (N×m). `X⁺` is the Moore-Penrose inverse
/// with singular values at or below `tol` (default [`default_tolerance`] of
/// the n×N matrix `X`) treated as zero; `Y · X⁺` is formed without
/// materializing `X⁺`.
pub fn solve_right_least_squares(xs: &Matrix, ys: &Matrix, tol: Option<f64>) -> Result<RightSolve> {
    require_non_empty(xs)?;
    if xs.rows() != ys.rows() {
        return Err(LinalgError::Shape(format!("{} input samples but {} output samples", xs.rows(), ys.rows())));
    }
    let (samples, n, m) = (xs.rows(), xs.cols(), ys.cols());
    let x = xs.as_faer().transpose();
    let dec = x.thin_svd().map_err(|_| LinalgError::NoConvergence { rows: n, cols: samples })?;
    let s = dec.S().column_vector();
    let sigma_max = if s.nrows() > 0 { s[0] } else { 0.0 };
    let tolerance = tol.unwrap_or_else(|| default_tolerance(n, samples, sigma_max));
    let rank = s.iter().take_while(|&&x| x > tolerance).count();
    if rank == 0 || m == 0 {
        return Ok(RightSolve { k: Matrix::zeros(m, n), rank, tolerance, sigma_max, sigma_min_kept: 0.0 });
    }
    // K = (Y · V_r) · Σ_r⁻¹ · U_rᵀ
    let mut yv = ys.as_faer().transpose() * dec.V().get(.., ..rank);
    for k in 0..rank {
        let inv = 1.0 / s[k];
        for i in 0..m {
            yv[(i, k)] *= inv;
        }
    }
    let k = Matrix::from_faer(&yv * dec.U().get(.., ..rank).transpose());
    Ok(RightSolve { k, rank, tolerance, sigma_max, sigma_min_kept: s[rank - 1] })
}

/// Kronecker product: block (i, j) of the result is `a[i, j] · b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    let (k, l) = b.shape();
    let mut out = Matrix::zeros(m * k, n * l);
    for i in 0..m {
        for j in 0..n {
            let aij = a[(i, j)];
            for p in 0..k {
                for q in 0..l {
                    out[(i * k + p, j * l + q)] = aij * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Row-major vectorization `(a11, …, a1n, a21, …, amn)`.
pub fn vec(m: &Matrix) -> Vector {
    Vector(m.data.clone())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(LinalgError::Shape(format!("cannot reshape a vector of length {} into {rows}x{cols}", v.len())));
    }
    Matrix::new(rows, cols, v.to_vec())
}

/// Evaluates `(A ⊗ Bᵀ) · v`, the vectorized form of `X ↦ A·X·B` applied to
/// `v = vec(X)`.
pub fn apply_vectorized_bilinear(a: &Matrix, b: &Matrix, v: &[f64]) -> Result<Vector> {
    if v.len() != a.cols() * b.rows() {
        return Err(LinalgError::Shape(format!(
            "vector of length {} does not match a {}x{} argument for A ({}x{}) and B ({}x{})",
            v.len(),
            a.cols(),
            b.rows(),
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let op = kron(a, &b.transpose());
    Ok(Vector(op.matvec(v)?))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Generalized absolute determinant: the product of the singular values.
///
/// Equals `|det m|` for square input and `√det(mᵀm)` / `√det(mmᵀ)` for tall
/// and wide input. If any singular value is at or below the tolerance the
/// result is flagged degenerate and only the values above it are
/// multiplied (the empty product being 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenAbsDet {
    /// Raw product; may overflow to infinity or underflow to zero for large
    /// operators, in which case `log10` is authoritative.
    pub value: f64,
    pub log10: f64,
    pub degenerate: bool,
    /// Number of singular values that entered the product.
    pub factors: usize,
}

pub fn gen_absdet(m: &Matrix, tol: Option<f64>) -> Result<GenAbsDet> {
    let s = singular_values(m)?;
    let sigma_max = s.first().copied().unwrap_or(0.0);
    let tol = tol.unwrap_or_else(|| default_tolerance(m.rows(), m.cols(), sigma_max));
    let kept: Vec<f64> = s.iter().copied().filter(|&x| x > tol).collect();
    Ok(GenAbsDet {
        value: kept.iter().product(),
        log10: kept.iter().map(|x| x.log10()).sum(),
        degenerate: kept.len() < s.len(),
        factors: kept.len(),
    })
}
