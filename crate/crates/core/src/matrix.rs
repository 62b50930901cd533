//! Dense row-major matrices and the handful of kernels everything else is built on.
//!
//! Verification mode runs everything in f64 single-threaded; fast mode may
//! row-parallelize the matmul kernels, which is bitwise identical to the
//! sequential result because each output row is computed independently.

use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{DeattError, Result};

/// Reserved value marking an entry as excluded from softmax.
/// Kept finite so ordinary arithmetic on masked matrices stays finite.
pub const SENTINEL: f64 = -1e30;

/// Any value at or below this is treated as masked when softmaxing.
pub const MASK_THRESHOLD: f64 = -1e29;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Configure fast-mode parallelism. `threads <= 1` keeps everything sequential.
/// Has no effect once kernels have already run (first call wins).
pub fn set_threads(threads: usize) {
    let _ = POOL.get_or_init(|| {
        if threads <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .ok()
        }
    });
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get().and_then(|p| p.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DeattError::Shape(format!(
                "expected {}x{}={} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Construct without the finiteness check; used by internal kernels whose
    /// inputs were already validated.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(DeattError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn check_finite(&self) -> Result<()> {
        for (idx, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(DeattError::NonFinite(format!(
                    "entry ({}, {}) = {}",
                    idx / self.cols.max(1),
                    idx % self.cols.max(1),
                    v
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
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

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(DeattError::Shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_acc(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }
}

/// c[m x n] += a[m x k] * b[k x n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let work = m * k * n;
    if work > 1 << 16 {
        if let Some(pool) = pool() {
            pool.install(|| {
                use rayon::prelude::*;
                c.par_chunks_mut(n)
                    .zip(a.par_chunks(k))
                    .for_each(|(crow, arow)| matmul_row(arow, b, crow, k, n));
            });
            return;
        }
    }
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], k, n);
    }
}

#[inline]
fn matmul_row(arow: &[f64], b: &[f64], crow: &mut [f64], k: usize, n: usize) {
    for t in 0..k {
        let av = arow[t];
        if av == 0.0 {
            continue;
        }
        let brow = &b[t * n..(t + 1) * n];
        for j in 0..n {
            crow[j] += av * brow[j];
        }
    }
}

/// c[m x p] += a[m x k] * b[p x k]^T  (rows of b are dotted with rows of a)
pub(crate) fn matmul_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * p..(i + 1) * p];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            crow[j] += acc;
        }
    }
}

/// c[k x n] += a[m x k]^T * b[m x n]
pub(crate) fn matmul_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for t in 0..m {
        let arow = &a[t * k..(t + 1) * k];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..k {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation over a matrix.
pub fn apply_activation(kind: Activation, x: &Matrix) -> Matrix {
    x.map(|v| kind.apply(v))
}

/// Row-wise softmax. Entries at or below [`MASK_THRESHOLD`] are excluded and
/// receive (numerically exact) zero weight. A row with every entry masked is a
/// degenerate-row error.
pub fn softmax_rows(s: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        softmax_row(s.row(i), &mut out.data_mut()[i * s.cols..(i + 1) * s.cols])
            .map_err(|_| DeattError::DegenerateRow { row: i })?;
    }
    Ok(out)
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) -> std::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > MASK_THRESHOLD && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = if v > MASK_THRESHOLD {
            (v - max).exp()
        } else {
            0.0
        };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}
