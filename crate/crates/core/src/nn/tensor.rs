//! Dense row-major tensors and the handful of kernels the models need.

use crate::error::{Error, Result};

/// Row-major tensor of `f64`. Vectors have a one-element shape, matrices two.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a vector is a single column.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `out = W x (+ b)` for a row-major `rows x cols` matrix.
pub(crate) fn affine_kernel(w: &[f64], cols: usize, x: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let rows = w.len() / cols.max(1);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        if let Some(b) = b {
            acc += b[r];
        }
        out.push(acc);
    }
    out
}

/// `W x + b`, checking that the three shapes conform.
pub fn affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 || w.cols() != x.len() {
        return Err(Error::Dimension {
            op: "affine",
            left: w.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    if b.len() != w.rows() {
        return Err(Error::Dimension {
            op: "affine",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(Tensor::vector(affine_kernel(
        w.data(),
        w.cols(),
        x.data(),
        Some(b.data()),
    )))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-softmax over the entries whose mask bit is `false`; masked entries
/// come back as `-inf`.
pub(crate) fn log_softmax_kernel(v: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let live = |i: usize| mask.is_none_or(|m| !m[i]);
    let max = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| live(i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| live(i))
        .map(|(_, &x)| (x - max).exp())
        .sum();
    let lse = max + sum.ln();
    v.iter()
        .enumerate()
        .map(|(i, &x)| if live(i) { x - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    Ok(log_softmax_kernel(v, None)
        .into_iter()
        .map(f64::exp)
        .collect())
}
