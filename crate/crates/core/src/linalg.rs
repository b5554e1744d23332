//! Dense row-major `f64` matrices and the instrumented product kernel.
//!
//! Every matrix product in the crate goes through [`matmul`], which records
//! the call and its FLOP count on an [`OpCounter`]. The cost analysis relies on
//! those counts being exact, so nothing else multiplies matrices.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from `U[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Add a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape("add_row_broadcast", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 x cols` row vector.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Counts matrix products issued through [`matmul`].
///
/// Not shared between threads; parallel callers keep their own and combine
/// them with [`OpCounter::merge`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub matmul_calls: u64,
    pub flops: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn merge(&mut self, other: &OpCounter) {
        self.matmul_calls += other.matmul_calls;
        self.flops += other.flops;
    }

    fn record(&mut self, m: usize, n: usize, p: usize) {
        self.matmul_calls += 1;
        self.flops += 2 * (m as u64) * (n as u64) * (p as u64);
    }
}

/// `a (m x n) · b (n x p)`.
///
/// Each output entry accumulates over the inner dimension in ascending order,
/// so results are bit-identical across runs.
pub fn matmul(a: &Matrix, b: &Matrix, counter: &mut OpCounter) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, n, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * p];
    // Four output rows per pass share each row of `b`.
    let mut blocks = out.chunks_exact_mut(4 * p.max(1));
    let mut i = 0;
    for block in &mut blocks {
        if p == 0 {
            break;
        }
        let (o0, rest) = block.split_at_mut(p);
        let (o1, rest) = rest.split_at_mut(p);
        let (o2, o3) = rest.split_at_mut(p);
        let rows = [&a.data[i * n..(i + 1) * n], &a.data[(i + 1) * n..(i + 2) * n], &a.data[(i + 2) * n..(i + 3) * n], &a.data[(i + 3) * n..(i + 4) * n]];
        for kk in 0..n {
            let (a0, a1, a2, a3) = (rows[0][kk], rows[1][kk], rows[2][kk], rows[3][kk]);
            let brow = &b.data[kk * p..(kk + 1) * p];
            for ((((&bv, x0), x1), x2), x3) in brow.iter().zip(o0.iter_mut()).zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()) {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i += 4;
    }
    let tail = blocks.into_remainder();
    for (r, orow) in tail.chunks_exact_mut(p.max(1)).enumerate() {
        let arow = &a.data[(i + r) * n..(i + r + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    counter.record(m, n, p);
    Ok(Matrix { rows: m, cols: p, data: out })
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Split the columns of `m` into `k` equal-width blocks, left to right.
pub fn split_columns(m: &Matrix, k: usize) -> Result<Vec<Matrix>> {
    if k == 0 || m.cols % k != 0 {
        return Err(Error::NotDivisible { width: m.cols, parts: k });
    }
    let w = m.cols / k;
    Ok((0..k)
        .map(|i| {
            let mut seg = Matrix::zeros(m.rows, w);
            for r in 0..m.rows {
                seg.row_mut(r).copy_from_slice(&m.row(r)[i * w..(i + 1) * w]);
            }
            seg
        })
        .collect())
}

/// Inverse of [`split_columns`].
pub fn concat_columns(parts: &[Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Ok(Matrix::zeros(0, 0));
    };
    let rows = first.rows;
    if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
        return Err(Error::shape("concat_columns", first.shape(), bad.shape()));
    }
    let cols = parts.iter().map(|p| p.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut offset = 0;
        for p in parts {
            out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
            offset += p.cols;
        }
    }
    Ok(out)
}
