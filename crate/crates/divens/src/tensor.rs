//! Dense row-major 64-bit float tensors.
//!
//! Everything in this crate is rank-2: scalars are `[1, 1]`, row vectors
//! `[1, m]`, column vectors `[n, 1]`. Keeping a single layout makes every
//! gradient rule in [`crate::tape`] a direct transcription of its matrix
//! formula.

use crate::error::{Error, Result};

/// Dense matrix of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and backing data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor-new",
                details: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    /// All-zero tensor.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    /// `[1, 1]` scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: [1, 1],
            data: vec![value],
        }
    }

    /// `[1, m]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: [1, values.len()],
            data: values,
        }
    }

    /// `k x k` identity scaled by `value`.
    pub fn scaled_identity(k: usize, value: f64) -> Self {
        let mut t = Tensor::zeros(k, k);
        for i in 0..k {
            t.data[i * k + i] = value;
        }
        t
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Shape as a slice (always length 2).
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Read-only view of the backing data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the backing data.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element at `(i, j)`.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// Sets element `(i, j)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.shape[1] + j] = value;
    }

    /// Row `i` as a slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let m = self.shape[1];
        &self.data[i * m..(i + 1) * m]
    }

    /// Extracts the single element of a `[1, 1]` tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.shape != [1, 1] {
            return Err(Error::NonScalarLoss(self.shape.to_vec()));
        }
        Ok(self.data[0])
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors share a shape.
    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Maximum absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Euclidean norm of the flattened data.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Index of the largest value, ties broken by the lowest index.
///
/// Panics on an empty slice; callers validate non-emptiness at their API
/// boundaries.
pub fn argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of an empty slice");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sums tensors with a pairwise reduction tree.
///
/// The tree shape depends only on the count, not the order of inputs, so
/// permuting the inputs changes the result by at most ordinary rounding
/// (well under 1e-12 for the sizes used here) instead of drifting with a
/// left-to-right accumulation.
pub fn pairwise_sum(tensors: &[Tensor]) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(Error::Empty("pairwise_sum"));
    }
    for t in &tensors[1..] {
        if !t.same_shape(&tensors[0]) {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sum",
                details: format!("{:?} vs {:?}", t.shape(), tensors[0].shape()),
            });
        }
    }
    fn reduce(ts: &[&Tensor]) -> Tensor {
        match ts.len() {
            1 => ts[0].clone(),
            n => {
                let half = n / 2;
                let left = reduce(&ts[..half]);
                let right = reduce(&ts[half..]);
                let mut out = left;
                for (o, r) in out.data_mut().iter_mut().zip(right.data().iter()) {
                    *o += r;
                }
                out
            }
        }
    }
    let refs: Vec<&Tensor> = tensors.iter().collect();
    Ok(reduce(&refs))
}
