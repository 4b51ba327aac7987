//! Dense row-major f64 matrices with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value. Operations on tensors that carry
//! gradient tracking record a backward node pointing at their inputs, so the
//! graph is acyclic by construction. Operations on untracked tensors record
//! nothing and cost only the arithmetic, which is what finite-difference
//! evaluation and inference use.

mod backward;
pub mod branch;
mod gradcheck;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use backward::Gradients;
pub use gradcheck::{grad_check, GradReport};
pub use ops::{BackwardFn, LAYER_NORM_EPS, NORMALIZE_EPS};

pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    tracked: bool,
    node: Option<Node>,
}

impl Drop for Inner {
    // Unlinks long graphs iteratively; the default recursive drop overflows
    // the stack on chains a few thousand ops deep.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = self.node.take().map(|n| n.inputs).unwrap_or_default();
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.inner) {
                if let Some(node) = inner.node.take() {
                    stack.extend(node.inputs);
                }
            }
        }
    }
}

/// A 2-D matrix of `f64` values, optionally linked into a backward graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl Tensor {
    fn build(rows: usize, cols: usize, data: Vec<f64>, tracked: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                rows,
                cols,
                data,
                tracked,
                node,
            }),
        }
    }

    /// Untracked tensor from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self::build(rows, cols, data, false, None))
    }

    /// Tracked leaf: gradients are accumulated for it during backward.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "parameter data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self::build(rows, cols, data, true, None))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::build(rows, cols, vec![0.0; rows * cols], false, None)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::build(rows, cols, vec![value; rows * cols], false, None)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::build(n, n, data, false, None)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::build(rows, cols, data, false, None)
    }

    /// Builds a tensor from equal-length rows. Panics on ragged input, so it
    /// is meant for literals in code and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::build(rows.len(), cols, data, false, None)
    }

    pub(crate) fn from_op(rows: usize, cols: usize, data: Vec<f64>, op: Op, inputs: Vec<Tensor>) -> Self {
        let tracked = inputs.iter().any(|t| t.inner.tracked);
        let node = tracked.then_some(Node { op, inputs });
        Self::build(rows, cols, data, tracked, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.inner.data[r * self.inner.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.inner.cols;
        &self.inner.data[r * c..(r + 1) * c]
    }

    /// The single value of a 1×1 tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// Same values, no graph link, no tracking.
    pub fn detach(&self) -> Tensor {
        Self::build(self.rows(), self.cols(), self.data().to_vec(), false, None)
    }

    /// Same values as a fresh tracked leaf.
    pub fn to_param(&self) -> Tensor {
        Self::build(self.rows(), self.cols(), self.data().to_vec(), true, None)
    }

    /// New tensor of the same shape and tracking with different values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        if self.is_tracked() {
            Tensor::param(self.rows(), self.cols(), data)
        } else {
            Tensor::new(self.rows(), self.cols(), data)
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `step` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, step: &str) -> Result<()> {
        match self.data().iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(
                step,
                format!(
                    "non-finite value {} at ({}, {})",
                    self.data()[i],
                    i / self.cols().max(1),
                    i % self.cols().max(1)
                ),
            )),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.is_tracked())
            .field("data", &self.data())
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality: shape and bitwise-equal data. Graph links are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
