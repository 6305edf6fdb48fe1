//! Dense real-valued linear algebra used as the full-precision reference path.
//!
//! Everything is row-major `f64`. Reductions over 1024 or more entries use
//! pairwise summation so that small differences compared against bounds in
//! [`crate::theory`] are not swamped by accumulated rounding.

use std::ops::{Deref, DerefMut};

use crate::error::{shape_err, Error, Result};

const PAIRWISE_CUTOFF: usize = 1024;

/// Sum of a slice; pairwise above 1024 entries.
pub fn sum(xs: &[f64]) -> f64 {
    if xs.len() < PAIRWISE_CUTOFF {
        xs.iter().sum()
    } else {
        pairwise(xs)
    }
}

fn pairwise(xs: &[f64]) -> f64 {
    if xs.len() <= 128 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise(&xs[..mid]) + pairwise(&xs[mid..])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() < PAIRWISE_CUTOFF {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    } else {
        let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        pairwise(&prods)
    }
}

/// Euclidean norm with scaling to avoid overflow on large entries.
pub fn l2_norm(xs: &[f64]) -> f64 {
    let scale = xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sq: Vec<f64> = xs.iter().map(|v| (v / scale) * (v / scale)).collect();
    scale * sum(&sq).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        sum(xs) / xs.len() as f64
    }
}

/// A real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("vector has non-finite entries".into()));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged rows");
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
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

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return shape_err(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        l2_norm(&self.data)
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest absolute column sum.
    pub fn norm_one(&self) -> f64 {
        let mut cols = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, v) in cols.iter_mut().zip(self.row(i)) {
                *acc += v.abs();
            }
        }
        cols.into_iter().fold(0.0, f64::max)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            &mut out.data,
            false,
        );
        Ok(out)
    }

    /// `self · otherᵀ`, the layout used for `inputs · weightsᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return shape_err(format!(
                "matmul_t of {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols, 1),
            (&other.data, 1, other.cols),
            &mut out.data,
            false,
        );
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return shape_err(format!(
                "t_matmul of ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols),
            (&other.data, other.cols, 1),
            &mut out.data,
            false,
        );
        Ok(out)
    }

    /// `self · x` for a vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<DenseVector> {
        if self.cols != x.len() {
            return shape_err(format!(
                "matvec of {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            ));
        }
        Ok(DenseVector(
            (0..self.rows).map(|i| dot(self.row(i), x)).collect(),
        ))
    }

    /// `selfᵀ · x`.
    pub fn t_matvec(&self, x: &[f64]) -> Result<DenseVector> {
        if self.rows != x.len() {
            return shape_err(format!(
                "transposed matvec of {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += w * xi;
            }
        }
        Ok(DenseVector(out))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row/column strided f64 GEMM: `c (+)= a · b` where `a` is m×k and `b` is k×n.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index addressed by the given shapes and
    // strides; callers construct them from matrices with matching dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GRAM_SQUARINGS: usize = 5;

/// Certified upper bound on the largest singular value of `a`.
///
/// Returns the minimum of three valid bounds: the Frobenius norm, the
/// geometric mean `sqrt(‖A‖₁‖A‖∞)`, and `‖(AᵀA)^(2^k)‖_F^(1/2^(k+1))` from
/// repeated squaring of the Gram matrix. The last overestimates `σ_max` by at
/// most `n^(1/2^(k+2))`, about 7% for a 64-wide matrix with k = 5. A relative
/// margin of 1e-9 covers floating-point error in the Gram products.
pub fn spectral_norm_upper_bound(a: &DenseMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let frob = a.frobenius();
    if frob == 0.0 {
        return 0.0;
    }
    let holder = (a.norm_one() * a.norm_inf()).sqrt();
    let gram = if a.cols() <= a.rows() {
        a.t_matmul(a)
    } else {
        a.matmul_t(a)
    }
    .expect("gram shapes agree");
    let bound = gram_power_bound(gram).unwrap_or(f64::INFINITY);
    frob.min(holder).min(bound) * (1.0 + 1e-9)
}

fn gram_power_bound(mut g: DenseMatrix) -> Option<f64> {
    let mut log_scale = {
        let f = g.frobenius();
        if f == 0.0 || !f.is_finite() {
            return None;
        }
        g = g.scale(1.0 / f);
        f.ln()
    };
    for _ in 0..GRAM_SQUARINGS {
        let sq = g.matmul(&g).ok()?;
        let f = sq.frobenius();
        if f == 0.0 || !f.is_finite() {
            return None;
        }
        log_scale = 2.0 * log_scale + f.ln();
        g = sq.scale(1.0 / f);
    }
    // λ_max(AᵀA)^(2^k) ≤ ‖(AᵀA)^(2^k)‖_F = exp(log_scale).
    let log_lambda = log_scale / (1u64 << GRAM_SQUARINGS) as f64;
    Some((0.5 * log_lambda).exp())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> DenseVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z = sum(&exps);
    DenseVector(exps.into_iter().map(|e| e / z).collect())
}

/// Log-softmax via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> DenseVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let lse = max + sum(&exps).ln();
    DenseVector(logits.iter().map(|v| v - lse).collect())
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::Invalid("entropy of an empty distribution".into()));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Invalid(
            "distribution has negative or non-finite mass".into(),
        ));
    }
    let total = sum(dist);
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!(
            "distribution sums to {total}, not 1"
        )));
    }
    let terms: Vec<f64> = dist
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .collect();
    Ok(sum(&terms).max(0.0))
}
