//! Dense row-major f64 tensors and the shared math kernels.
//!
//! Shapes are rank 0 (scalar), 1 (vector) or 2 (matrix). The same kernels
//! back both the tape-recorded forward ops and the plain inference paths, so
//! a value computed with or without a tape is bitwise identical.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Scalar value; panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Kernels shared by tape ops and plain inference.
pub mod kernels {
    /// C += A (r×k) · B (k×c); caller provides zeroed or accumulating output.
    pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
        debug_assert_eq!(a.len(), r * k);
        debug_assert_eq!(b.len(), k * c);
        debug_assert_eq!(out.len(), r * c);
        for i in 0..r {
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * c..(l + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        matmul_acc(a, b, &mut out, r, k, c);
        out
    }

    pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a[i * cols + j];
            }
        }
        out
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        out
    }

    pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = log_softmax_rows(x, rows, cols);
        for v in &mut out {
            *v = v.exp();
        }
        out
    }

    /// Row-wise log-sum-exp, one value per row.
    pub fn logsumexp_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out[r] = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        }
        out
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.max(0.0)).collect()
    }

    /// x (r×c) + bias (c) broadcast over rows.
    pub fn add_row(x: &[f64], bias: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        debug_assert_eq!(bias.len(), cols);
        let mut out = x.to_vec();
        for r in 0..rows {
            for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *o += b;
            }
        }
        out
    }
}
