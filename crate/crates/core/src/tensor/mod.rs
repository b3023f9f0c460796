//! Dense row-major tensors plus a reverse-mode differentiation tape.
//!
//! Everything the model needs is rank 0, 1 or 2; higher ranks are rejected
//! at construction. Values are immutable after creation (data sits behind an
//! `Arc`), so registering a large parameter on a tape never copies it.

pub mod gradcheck;
pub mod tape;

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use tape::{Tape, TensorId};

/// Highest tensor rank the op suite supports.
pub const MAX_RANK: usize = 2;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("expected a scalar tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.len() > MAX_RANK {
            return Err(TensorError::BadShape {
                op: "Tensor::new",
                shape,
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape {
                op: "Tensor::new",
                shape,
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<T>>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.len() > MAX_RANK || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![T::zero(); numel])
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::BadShape {
                op: "Tensor::from_rows",
                shape: vec![m, n],
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable view of the storage; clones it first if a tape still shares
    /// it (optimizer updates run between tapes, so this is normally free).
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        Arc::<Vec<T>>::make_mut(&mut self.data).as_mut_slice()
    }

    /// Single stored value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    /// Rows (first dimension) for rank-2, length for rank-1, 1 for rank-0.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Numeric equality (so -0.0 == 0.0), exact otherwise.
    pub fn all_close(&self, other: &Self, tol: T) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| (*a - *b).abs() <= tol)
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
