//! Dense row-major `f32` arrays with the handful of linear-algebra and
//! reduction primitives the rest of the crate is built on.
//!
//! Storage is 32-bit; accumulation happens in 32-bit or wider registers
//! depending on the operation. Layout is row-major everywhere so that
//! permutations and block indexing stay unambiguous.

use crate::error::{Error, Result};

/// Dense rank-N array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    ///
    /// Every extent must be positive and `data.len()` must equal the
    /// product of the extents.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Dimension("tensor shape must be non-empty".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    /// Square identity matrix of extent `n`.
    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the flat data under a new shape with the same element
    /// count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Largest absolute element difference between two equally shaped
    /// tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    /// True iff all elements are finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with lane-split accumulation so the compiler can vectorize
/// while keeping a fixed, run-to-run deterministic summation order.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let off = c * LANES;
        for l in 0..LANES {
            acc[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut total = tail;
    for v in acc {
        total += v;
    }
    total
}

/// Standard matrix product of a `[m, k]` by a `[k, n]` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects rank-2 tensors, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    if k != kb {
        return Err(Error::Dimension(format!(
            "inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    // i-k-j order: the inner loop runs over contiguous rows of `b` and
    // `out`, with one independent accumulator per output column.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let aik = a.data[i * k + l];
            let b_row = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Row-wise softmax of a rank-2 tensor, computed with max-subtraction.
///
/// Exponentials are evaluated in `f64` and each row is normalized by its
/// `f64` sum, so output rows sum to one well within 1e-6.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Dimension(format!(
            "softmax_rows expects a rank-2 tensor, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    if n == 0 {
        return Err(Error::Dimension("softmax over an empty row".into()));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        softmax_row_into(row, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(&[m, n], out)
}

/// Softmax of one row into a preallocated slice. `-inf` entries come out
/// as exact zeros; the row must contain at least one finite entry.
pub(crate) fn softmax_row_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = f64::from(v - max).exp();
        sum += e;
        *o = e as f32;
    }
    for o in out.iter_mut() {
        *o = (f64::from(*o) / sum) as f32;
    }
}

/// True iff the largest absolute element difference is at most `atol`.
pub fn allclose(a: &Tensor, b: &Tensor, atol: f32) -> Result<bool> {
    Ok(a.max_abs_diff(b)? <= atol)
}
