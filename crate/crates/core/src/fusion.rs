//! Fused interaction scores e = P·Hᵀ + γ·M and soft cross-attention
//! alignment.
//!
//! γ is a single trainable scalar weighting the word-overlap matrix M's
//! contribution to the attention scores. The default alignment aggregates
//! the partner sentence (each token of P is re-expressed from H's rows and
//! vice versa); `Alignment::AsPrinted` instead aggregates a sentence's own
//! rows, which requires the two sides to be padded to a common length.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, TensorId};

pub const GAMMA_INIT: f64 = 0.5;

/// Which rows the attention weights aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Alignment {
    /// Each side aggregates the other side's encoder rows.
    #[default]
    Cross,
    /// Each side aggregates its own rows (comparison mode; needs a square
    /// score matrix).
    AsPrinted,
}

/// e[i,j] = dot(P[i], H[j]) + γ·M[i,j].
pub fn fused_scores<T: Scalar>(
    tape: &mut Tape<T>,
    p_tf: TensorId,
    h_tf: TensorId,
    m: TensorId,
    gamma: TensorId,
) -> Result<TensorId, TensorError> {
    let base = dot_scores(tape, p_tf, h_tf)?;
    let weighted = tape.mul_scalar(gamma, m)?;
    tape.add(base, weighted)
}

/// Plain dot-product scores P·Hᵀ.
pub fn dot_scores<T: Scalar>(
    tape: &mut Tape<T>,
    p_tf: TensorId,
    h_tf: TensorId,
) -> Result<TensorId, TensorError> {
    let ht = tape.transpose(h_tf)?;
    tape.matmul(p_tf, ht)
}

/// Soft-attention alignment plus the two weight matrices (row-normalized
/// over H positions and column-normalized over P positions) for export.
pub fn cross_align_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    e: TensorId,
    p_tf: TensorId,
    h_tf: TensorId,
    mask_p: &[bool],
    mask_h: &[bool],
    alignment: Alignment,
) -> Result<AlignOutput, TensorError> {
    let weights_p = tape.softmax(e, 1, Some(mask_h))?;
    let weights_h = tape.softmax(e, 0, Some(mask_p))?;
    let weights_h_t = tape.transpose(weights_h)?;
    let (p_hat, h_hat) = match alignment {
        Alignment::Cross => (
            tape.matmul(weights_p, h_tf)?,
            tape.matmul(weights_h_t, p_tf)?,
        ),
        Alignment::AsPrinted => (
            tape.matmul(weights_p, p_tf)?,
            tape.matmul(weights_h_t, h_tf)?,
        ),
    };
    Ok(AlignOutput {
        p_hat,
        h_hat,
        weights_p,
        weights_h,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AlignOutput {
    /// P re-expressed through attention (l_p×d).
    pub p_hat: TensorId,
    /// H re-expressed through attention (l_h×d).
    pub h_hat: TensorId,
    /// softmax over each row of e (attention of P onto H).
    pub weights_p: TensorId,
    /// softmax over each column of e (attention of H onto P).
    pub weights_h: TensorId,
}

/// Default cross alignment: P̂[i] = Σ_j softmax_j(e[i,·])·H[j] and
/// Ĥ[j] = Σ_i softmax_i(e[·,j])·P[i].
pub fn cross_align<T: Scalar>(
    tape: &mut Tape<T>,
    e: TensorId,
    p_tf: TensorId,
    h_tf: TensorId,
    mask_p: &[bool],
    mask_h: &[bool],
) -> Result<(TensorId, TensorId), TensorError> {
    cross_align_with_weights(tape, e, p_tf, h_tf, mask_p, mask_h, Alignment::Cross)
        .map(|o| (o.p_hat, o.h_hat))
}
