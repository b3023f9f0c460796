//! Sentence-pair semantic matching that fuses a from-scratch transformer
//! encoder with a word-level sememe interaction matrix injected into soft
//! cross-attention, plus the full training and evaluation pipeline.
//!
//! All numerics are generic over [`scalar::Scalar`] (f32 for training, f64
//! for verification); concrete aliases live at the crate root.

pub mod encoder;
pub mod fusion;
pub mod head;
pub mod model;
pub mod scalar;
pub mod sememe;
pub mod tensor;
pub mod text;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorError, TensorId};

/// f32 tensor: the training default.
pub type Tensor32 = Tensor<f32>;
/// f64 tensor: used wherever gradients are verified numerically.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
