//! Dense row-major `f64` tensors and the raw numeric kernels the graph ops use.

use serde::{Deserialize, Serialize};

/// A dense tensor of `f64` values stored in row-major order.
///
/// A tensor with an empty shape is a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, returning `None` when `product(shape) != data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Option<Self> {
        if shape.iter().product::<usize>() == data.len() {
            Some(Self { shape, data })
        } else {
            None
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Last-axis length; 1 for scalars.
    pub(crate) fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub(crate) fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub(crate) fn with_shape(&self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Self { shape, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of equal-shaped tensors.
    pub(crate) fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data }
    }

    /// Combines a matrix-like tensor with a vector broadcast along its last axis.
    pub(crate) fn zip_rows(&self, row: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = row.len();
        debug_assert_eq!(self.last_dim(), n);
        let mut data = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks_exact(n) {
            data.extend(chunk.iter().zip(&row.data).map(|(&a, &b)| f(a, b)));
        }
        Self { shape: self.shape.clone(), data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums over every axis but the last: `[.., n] -> [n]`.
    pub(crate) fn sum_rows(&self) -> Self {
        let n = self.last_dim();
        let mut out = vec![0.0; n];
        for chunk in self.data.chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Self { shape: vec![n], data: out }
    }

    /// Repeats a vector `rows` times: `[n] -> [rows, n]`.
    pub(crate) fn broadcast_rows(&self, rows: usize) -> Self {
        let mut data = Vec::with_capacity(rows * self.data.len());
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Self { shape: vec![rows, self.data.len()], data }
    }

    /// `[m, k] x [k, n] -> [m, n]`; callers check shapes.
    pub(crate) fn matmul(&self, rhs: &Self) -> Self {
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self { shape: vec![m, n], data: out }
    }

    pub(crate) fn transpose(&self) -> Self {
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self { shape: vec![n, m], data: out }
    }

    /// Columns `[start, start + len)` of the last axis.
    pub(crate) fn slice_last(&self, start: usize, len: usize) -> Self {
        let n = self.last_dim();
        let mut data = Vec::with_capacity(self.rows() * len);
        for chunk in self.data.chunks_exact(n) {
            data.extend_from_slice(&chunk[start..start + len]);
        }
        let mut shape = self.shape.clone();
        match shape.last_mut() {
            Some(last) => *last = len,
            None => shape.push(len),
        }
        Self { shape, data }
    }

    /// Inverse of `slice_last`: embeds along the last axis into zeros of width `total`.
    pub(crate) fn pad_last(&self, start: usize, total: usize) -> Self {
        let n = self.last_dim();
        let rows = self.rows();
        let mut data = vec![0.0; rows * total];
        for (r, chunk) in self.data.chunks_exact(n).enumerate() {
            data[r * total + start..r * total + start + n].copy_from_slice(chunk);
        }
        let mut shape = self.shape.clone();
        match shape.last_mut() {
            Some(last) => *last = total,
            None => shape.push(total),
        }
        Self { shape, data }
    }

    /// Softmax over the last axis, numerically stabilized by the row maximum.
    pub(crate) fn softmax_last(&self) -> Self {
        let n = self.last_dim();
        let mut data = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks_exact(n) {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(chunk.iter().map(|&v| (v - max).exp()));
            let total: f64 = data[start..].iter().sum();
            for v in &mut data[start..] {
                *v /= total;
            }
        }
        Self { shape: self.shape.clone(), data }
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}
