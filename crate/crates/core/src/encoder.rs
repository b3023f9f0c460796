//! Transformer encoder stack: multi-head self-attention with absolute
//! sinusoidal position encodings, pre-norm residual wiring and a
//! position-wise feed-forward block.
//!
//! Padded key positions receive exactly zero attention mass and padded rows
//! are zeroed after every sub-layer, so padding content can never reach a
//! valid position.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum EncoderConfigError {
    #[error("d_model must be even and positive, got {0}")]
    OddModelWidth(usize),
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadsDontDivide { d_model: usize, n_heads: usize },
    #[error("n_layers must be at least 1")]
    NoLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Embedding and model width.
    pub d_model: usize,
    /// Encoder stack depth.
    pub n_layers: usize,
    /// Attention head count; d_k = d_model / n_heads.
    pub n_heads: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
}

impl EncoderConfig {
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EncoderConfigError> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(EncoderConfigError::OddModelWidth(self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(EncoderConfigError::HeadsDontDivide {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.n_layers == 0 {
            return Err(EncoderConfigError::NoLayers);
        }
        Ok(())
    }
}

/// Tape handles to one encoder layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ff_w1: TensorId,
    pub ff_b1: TensorId,
    pub ff_w2: TensorId,
    pub ff_b2: TensorId,
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
}

/// Sinusoidal position encodings: PE[p,2m] = sin(p/10000^(2m/d)),
/// PE[p,2m+1] = cos(p/10000^(2m/d)). Computed in f64 whatever the model
/// precision, so both precisions share one table.
pub fn positional_encoding<T: Scalar>(length: usize, d_model: usize) -> Tensor<T> {
    assert!(d_model % 2 == 0, "d_model must be even");
    let mut data = Vec::with_capacity(length * d_model);
    for p in 0..length {
        for m in 0..d_model / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * m as f64 / d_model as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![length, d_model], data).expect("positive dims")
}

/// Scaled dot-product attention per head over `x` (len×d_model), heads
/// concatenated and projected by W^O. Returns the output and the per-head
/// attention weight nodes (each len×len) for inspection.
pub fn multi_head_attention_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    layer: &LayerParams,
    mask: &[bool],
    config: &EncoderConfig,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let d_k = config.d_k();
    let inv_sqrt_dk = T::from_f64(1.0 / (d_k as f64).sqrt());

    let q_all = tape.matmul(x, layer.wq)?;
    let k_all = tape.matmul(x, layer.wk)?;
    let v_all = tape.matmul(x, layer.wv)?;

    let mut head_outputs = Vec::with_capacity(config.n_heads);
    let mut head_weights = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let q = tape.slice(q_all, 1, h * d_k, d_k)?;
        let k = tape.slice(k_all, 1, h * d_k, d_k)?;
        let v = tape.slice(v_all, 1, h * d_k, d_k)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, inv_sqrt_dk)?;
        let weights = tape.softmax(scaled, 1, Some(mask))?;
        head_weights.push(weights);
        head_outputs.push(tape.matmul(weights, v)?);
    }
    let concat = tape.concat(1, &head_outputs)?;
    let projected = tape.matmul(concat, layer.wo)?;
    // padded query rows produce zeros
    let out = tape.zero_rows(projected, mask)?;
    Ok((out, head_weights))
}

pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    layer: &LayerParams,
    mask: &[bool],
    config: &EncoderConfig,
) -> Result<TensorId, TensorError> {
    multi_head_attention_with_weights(tape, x, layer, mask, config).map(|(out, _)| out)
}

/// Pre-norm residual layer: X + MHA(LN(X)) then X + FFN(LN(X)), padded
/// rows zeroed after each sub-layer.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    layer: &LayerParams,
    mask: &[bool],
    config: &EncoderConfig,
) -> Result<TensorId, TensorError> {
    let eps = T::from_f64(LAYER_NORM_EPS);

    let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, eps)?;
    let attended = multi_head_attention(tape, normed, layer, mask, config)?;
    let summed = tape.add(x, attended)?;
    let x1 = tape.zero_rows(summed, mask)?;

    let normed2 = tape.layer_norm(x1, layer.ln2_gain, layer.ln2_bias, eps)?;
    let hidden = tape.matmul(normed2, layer.ff_w1)?;
    let hidden = tape.add_rowvec(hidden, layer.ff_b1)?;
    let hidden = tape.relu(hidden)?;
    let ff = tape.matmul(hidden, layer.ff_w2)?;
    let ff = tape.add_rowvec(ff, layer.ff_b2)?;
    let summed2 = tape.add(x1, ff)?;
    tape.zero_rows(summed2, mask)
}

/// Embeds `ids`, adds position encodings and applies the layer stack.
pub fn encode_sentence<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &[usize],
    mask: &[bool],
    embedding: TensorId,
    layers: &[LayerParams],
    config: &EncoderConfig,
) -> Result<TensorId, TensorError> {
    let gathered = tape.embedding_gather(embedding, ids)?;
    let pe = tape.constant(positional_encoding::<T>(ids.len(), config.d_model));
    let mut x = tape.add(gathered, pe)?;
    for layer in layers {
        x = encoder_layer(tape, x, layer, mask, config)?;
    }
    Ok(x)
}
