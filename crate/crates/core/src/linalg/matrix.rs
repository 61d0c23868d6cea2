use serde::{Deserialize, Serialize};

use crate::error::{PolarError, Result};

/// Dense row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PolarError::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PolarError::NonFinite("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(PolarError::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(v: &[f32]) -> Self {
        Self::from_raw(1, v.len(), v.to_vec())
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`. Each output entry accumulates in `f64` over the inner
    /// index in ascending order and is rounded once.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(PolarError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let out = matmul_raw(&self.data, self.rows, self.cols, &other.data, other.cols);
        finite(Matrix::from_raw(self.rows, other.cols, out), "matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(PolarError::shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let t = other.transpose();
        let out = matmul_raw(&self.data, self.rows, self.cols, &t.data, t.cols);
        finite(Matrix::from_raw(self.rows, other.rows, out), "matmul_t")
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Result<Matrix> {
        let out = Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect());
        finite(out, "scale")
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn zip(&self, other: &Matrix, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(PolarError::shape(format!(
                "{what} {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite(Matrix::from_raw(self.rows, self.cols, data), what)
    }
}

fn finite(m: Matrix, what: &str) -> Result<Matrix> {
    if m.data.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(PolarError::NonFinite(what.to_string()))
    }
}

/// Row-major `a (n×k) · b (k×m)` in i-k-j order. For a fixed output entry the
/// additions still happen in ascending `k`, so results are bitwise equal to the
/// naive i-j-k loop (f64 accumulator, one rounding per entry) while the inner
/// loop vectorizes.
pub(crate) fn matmul_raw(a: &[f32], n: usize, k: usize, b: &[f32], m: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let s = f64::from(a[i * k + p]);
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += s * f64::from(bv);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(PolarError::ZeroVector);
    }
    if !n.is_finite() {
        return Err(PolarError::NonFinite("l2_normalize".into()));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(PolarError::shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(PolarError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0) as f32)
}

/// Max-subtracted softmax.
pub fn softmax_row(v: &[f32]) -> Vec<f32> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v.iter().map(|&x| f64::from(x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}
