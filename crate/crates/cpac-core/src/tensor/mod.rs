//! Dense N-way tensors in column-major (first index fastest) layout.
//!
//! Column-major storage makes `vec` of a matrix — column stacking — a plain
//! view of the flat data, and every gradient formula in [`crate::layers`] is
//! stated through that vectorization. All values are `f64`.

mod ops;
mod shape;

pub use ops::{
    flatten_output, fold_output, kron, mode_mul_vec, outer, patch_expand, patch_expand_adjoint,
    rank_one, unfold, vec_of,
};
pub use shape::ShapeDescriptor;

use serde::{Deserialize, Serialize};

use crate::error::{CpacError, Result};

/// Dense tensor with explicit shape and flat column-major data.
///
/// Flat offset of index `(i_0, .., i_{N-1})` is
/// `i_0 + I_0 * (i_1 + I_1 * (i_2 + ..))`, so the first mode varies fastest.
/// For an order-2 tensor this is exactly column-major matrix storage, and the
/// flat data read in order is the column-stacking vectorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorWire")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Wire form for deserialization; shape/data consistency is re-checked on
/// the way in so a hand-edited file cannot produce a malformed tensor.
#[derive(Deserialize)]
struct TensorWire {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorWire> for Tensor {
    type Error = CpacError;

    fn try_from(wire: TensorWire) -> Result<Tensor> {
        Tensor::from_parts(wire.shape, wire.data)
    }
}

impl Tensor {
    /// Builds a tensor from a shape and flat column-major data.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(CpacError::shape("tensor order must be at least 1"));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(CpacError::shape(format!(
                "all extents must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CpacError::shape(format!(
                "shape {shape:?} implies {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Fills a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..t.data.len() {
            t.data[flat] = f(&idx);
            // advance the multi-index, first mode fastest
            for (i, extent) in idx.iter_mut().zip(shape) {
                *i += 1;
                if *i < *extent {
                    break;
                }
                *i = 0;
            }
        }
        t
    }

    /// Order-1 tensor from a plain vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Order-2 tensor from column-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_parts(vec![rows, cols], data)
    }

    /// Order-2 tensor from row slices; handy in tests where literals read
    /// naturally row by row.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(CpacError::shape("rows must be non-empty and equal length"));
        }
        Ok(Tensor::from_fn(&[m, n], |idx| rows[idx[0]][idx[1]]))
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |idx| if idx[0] == idx[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of modes.
    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn extent(&self, mode: usize) -> usize {
        self.shape[mode]
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat column-major offset of a multi-index.
    #[inline]
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, extent) in idx.iter().zip(&self.shape) {
            debug_assert!(i < extent, "index {idx:?} out of bounds for {:?}", self.shape);
            off += i * stride;
            stride *= extent;
        }
        off
    }

    #[inline]
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Reinterprets the flat data under a new shape of the same length.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != self.data.len() {
            return Err(CpacError::shape(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// `self += c * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, c: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(CpacError::shape(format!(
                "add_scaled shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Flat inner product; shapes must match elementwise.
    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Order-2 matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.order() != 2 || other.order() != 2 {
            return Err(CpacError::shape("matmul requires order-2 operands"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(CpacError::shape(format!(
                "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for j in 0..n {
            for l in 0..k {
                let b = other.data[l + k * j];
                if b == 0.0 {
                    continue;
                }
                let col = &self.data[l * m..(l + 1) * m];
                let dst = &mut out.data[j * m..(j + 1) * m];
                for i in 0..m {
                    dst[i] += col[i] * b;
                }
            }
        }
        Ok(out)
    }

    /// Order-2 transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.order() != 2 {
            return Err(CpacError::shape("transpose requires an order-2 tensor"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_fn(&[n, m], |idx| self.at(&[idx[1], idx[0]])))
    }
}
