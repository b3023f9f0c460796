//! Full model: named parameter store, deterministic initialization, and the
//! per-pair forward pass (encode → fuse → align → BiLSTM → pool → classify).
//!
//! Parameters are sampled in f64 from a seeded generator and converted to
//! the working precision, so a seed selects the same underlying values in
//! f32 and f64 runs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::encoder::{self, EncoderConfig, LayerParams};
use crate::fusion::{self, Alignment, GAMMA_INIT};
use crate::head::{self, BiLstmParams, HeadParams, LstmCellParams};
use crate::scalar::Scalar;
use crate::sememe::SememeMatrix;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use crate::text::TokenizedPair;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Static dimensions everything else derives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    /// BiLSTM hidden size per direction; also the classifier hidden width.
    pub hidden: usize,
    pub max_len: usize,
}

impl ModelDims {
    /// Pooled sentence representation length: max- plus avg-pool over
    /// d_model + 2·hidden features.
    pub fn rep_dim(&self) -> usize {
        2 * (self.encoder.d_model + 2 * self.hidden)
    }

    /// Classifier input: [P_rep; H_rep; P_rep−H_rep; HN_col; HN_row].
    pub fn feature_dim(&self) -> usize {
        3 * self.rep_dim() + 2 * self.max_len
    }
}

/// Name → shape of every trainable array, in a fixed order.
fn array_specs(dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    let d = dims.encoder.d_model;
    let d_ff = dims.encoder.d_ff;
    let h = dims.hidden;
    let mut specs = vec![("embedding".to_string(), vec![dims.vocab_size, d])];
    for l in 0..dims.encoder.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("encoder.{l}.{w}"), vec![d, d]));
        }
        specs.push((format!("encoder.{l}.ff.w1"), vec![d, d_ff]));
        specs.push((format!("encoder.{l}.ff.b1"), vec![d_ff]));
        specs.push((format!("encoder.{l}.ff.w2"), vec![d_ff, d]));
        specs.push((format!("encoder.{l}.ff.b2"), vec![d]));
        specs.push((format!("encoder.{l}.ln1.gain"), vec![d]));
        specs.push((format!("encoder.{l}.ln1.bias"), vec![d]));
        specs.push((format!("encoder.{l}.ln2.gain"), vec![d]));
        specs.push((format!("encoder.{l}.ln2.bias"), vec![d]));
    }
    specs.push(("fusion.gamma".to_string(), vec![]));
    for dir in ["fwd", "bwd"] {
        specs.push((format!("bilstm.{dir}.w_x"), vec![4 * h, d]));
        specs.push((format!("bilstm.{dir}.w_h"), vec![4 * h, h]));
        specs.push((format!("bilstm.{dir}.b"), vec![4 * h]));
    }
    specs.push(("head.w1".to_string(), vec![dims.feature_dim(), h]));
    specs.push(("head.b1".to_string(), vec![h]));
    specs.push(("head.w2".to_string(), vec![h, 2]));
    specs.push(("head.b2".to_string(), vec![2]));
    specs
}

/// Parameter counts per group, for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub embeddings: usize,
    pub encoder: usize,
    pub fusion: usize,
    pub bilstm: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embeddings + self.encoder + self.fusion + self.bilstm + self.head
    }
}

pub fn count_params(dims: &ModelDims) -> ParamCounts {
    let mut counts = ParamCounts {
        embeddings: 0,
        encoder: 0,
        fusion: 0,
        bilstm: 0,
        head: 0,
    };
    for (name, shape) in array_specs(dims) {
        let n: usize = shape.iter().product();
        match name.split('.').next().unwrap() {
            "embedding" => counts.embeddings += n,
            "encoder" => counts.encoder += n,
            "fusion" => counts.fusion += n,
            "bilstm" => counts.bilstm += n,
            "head" => counts.head += n,
            other => unreachable!("unknown group {other}"),
        }
    }
    counts
}

/// All trainable weights, addressable by name.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    arrays: BTreeMap<String, Tensor<T>>,
    dims: ModelDims,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: embeddings ~ N(0, 0.02), matrices uniform
    /// ±√(6/(rows+cols)), biases zero, layer-norm gains one, γ = 0.5.
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let mut arrays = BTreeMap::new();
        for (name, shape) in array_specs(dims) {
            let n: usize = shape.iter().product::<usize>().max(1);
            let data: Vec<T> = if name == "embedding" {
                (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
            } else if name == "fusion.gamma" {
                vec![T::from_f64(GAMMA_INIT)]
            } else if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let uniform = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| T::from_f64(uniform.sample(&mut rng))).collect()
            } else if name.ends_with("gain") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            let tensor = Tensor::new(shape, data).expect("spec shapes are valid");
            arrays.insert(name, tensor);
        }
        Self {
            arrays,
            dims: *dims,
        }
    }

    /// Rebuilds a parameter set from named arrays, validating every shape
    /// against what `dims` requires.
    pub fn from_arrays(
        dims: &ModelDims,
        mut arrays: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let mut out = BTreeMap::new();
        for (name, shape) in array_specs(dims) {
            let tensor = arrays
                .remove(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: shape,
                    found: tensor.shape().to_vec(),
                });
            }
            out.insert(name, tensor);
        }
        Ok(Self {
            arrays: out,
            dims: *dims,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.get(name)
    }

    pub fn gamma(&self) -> T {
        self.arrays["fusion.gamma"].data()[0]
    }

    /// Iterates (name, tensor) in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.arrays.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    /// In-place update of one array (copy-on-write if a tape still shares
    /// the storage).
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut [T])) {
        let tensor = self.arrays.get_mut(name).expect("known parameter");
        f(tensor.data_mut());
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }
}

/// Tape handles for every parameter, grouped the way the forward pass
/// consumes them.
pub struct BoundParams {
    pub by_name: BTreeMap<String, TensorId>,
    pub embedding: TensorId,
    pub layers: Vec<LayerParams>,
    pub gamma: TensorId,
    pub bilstm: BiLstmParams,
    pub head: HeadParams,
}

/// Registers every parameter as a tape leaf. With `trainable` false the
/// whole forward runs gradient-free (evaluation).
pub fn bind_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> BoundParams {
    bind_params_inner(tape, params, trainable, None)
}

/// Binds all parameters as constants except `name`, which is wired to an
/// existing leaf. This lets a finite-difference harness probe one
/// parameter array while the rest stay fixed.
pub fn bind_params_with_override<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    name: &str,
    leaf: TensorId,
) -> BoundParams {
    bind_params_inner(tape, params, false, Some((name, leaf)))
}

fn bind_params_inner<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
    override_leaf: Option<(&str, TensorId)>,
) -> BoundParams {
    let mut by_name = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let id = match override_leaf {
            Some((probed, leaf)) if probed == name => leaf,
            _ => tape.leaf(tensor.clone(), trainable),
        };
        by_name.insert(name.to_string(), id);
    }
    let id = |name: &str| by_name[name];
    let layers = (0..params.dims.encoder.n_layers)
        .map(|l| LayerParams {
            wq: id(&format!("encoder.{l}.wq")),
            wk: id(&format!("encoder.{l}.wk")),
            wv: id(&format!("encoder.{l}.wv")),
            wo: id(&format!("encoder.{l}.wo")),
            ff_w1: id(&format!("encoder.{l}.ff.w1")),
            ff_b1: id(&format!("encoder.{l}.ff.b1")),
            ff_w2: id(&format!("encoder.{l}.ff.w2")),
            ff_b2: id(&format!("encoder.{l}.ff.b2")),
            ln1_gain: id(&format!("encoder.{l}.ln1.gain")),
            ln1_bias: id(&format!("encoder.{l}.ln1.bias")),
            ln2_gain: id(&format!("encoder.{l}.ln2.gain")),
            ln2_bias: id(&format!("encoder.{l}.ln2.bias")),
        })
        .collect();
    BoundParams {
        embedding: id("embedding"),
        layers,
        gamma: id("fusion.gamma"),
        bilstm: BiLstmParams {
            fwd: LstmCellParams {
                w_x: id("bilstm.fwd.w_x"),
                w_h: id("bilstm.fwd.w_h"),
                b: id("bilstm.fwd.b"),
            },
            bwd: LstmCellParams {
                w_x: id("bilstm.bwd.w_x"),
                w_h: id("bilstm.bwd.w_h"),
                b: id("bilstm.bwd.b"),
            },
        },
        head: HeadParams {
            w1: id("head.w1"),
            b1: id("head.b1"),
            w2: id("head.w2"),
            b2: id("head.b2"),
        },
        by_name,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub alignment: Alignment,
    /// Also produce the cosine similarity of the pooled representations
    /// (needed by the ranking loss).
    pub want_cosine: bool,
}

/// Tape handles to every interesting intermediate of one pair's forward.
pub struct PairForward {
    pub p_tf: TensorId,
    pub h_tf: TensorId,
    pub e: TensorId,
    pub weights_p: TensorId,
    pub weights_h: TensorId,
    pub p_rep: TensorId,
    pub h_rep: TensorId,
    pub h_feat: TensorId,
    pub probs: TensorId,
    /// Positive-class probability, rank-0.
    pub p1: TensorId,
    pub cosine: Option<TensorId>,
}

/// Runs one sentence pair through the whole model. Sequences are processed
/// at their true lengths (padding isolation makes this equivalent to padded
/// evaluation); `matrix` is the word-overlap matrix over those lengths and
/// `None` means all zeros (knowledge channel off or empty lexicon).
pub fn forward_pair<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    pair: &TokenizedPair,
    matrix: Option<&SememeMatrix>,
    dims: &ModelDims,
    options: &ForwardOptions,
) -> Result<PairForward, TensorError> {
    let (l_p, l_h) = (pair.len_p, pair.len_h);
    let ids_p = &pair.ids_p[..l_p];
    let ids_h = &pair.ids_h[..l_h];
    let valid_p = vec![true; l_p];
    let valid_h = vec![true; l_h];

    let p_tf = encoder::encode_sentence(tape, ids_p, &valid_p, bound.embedding, &bound.layers, &dims.encoder)?;
    let h_tf = encoder::encode_sentence(tape, ids_h, &valid_h, bound.embedding, &bound.layers, &dims.encoder)?;

    let m_owned;
    let m = match matrix {
        Some(m) => m,
        None => {
            m_owned = SememeMatrix::zeros(l_p, l_h);
            &m_owned
        }
    };
    let sums = m.sums(dims.max_len);

    // the comparison alignment aggregates a sentence's own rows, which
    // needs a square score matrix: pad both sides to a common length
    let (align, e, p_len, h_len) = match options.alignment {
        Alignment::Cross => {
            let m_node = tape.constant(m.to_tensor::<T>());
            let e = fusion::fused_scores(tape, p_tf, h_tf, m_node, bound.gamma)?;
            (
                fusion::cross_align_with_weights(tape, e, p_tf, h_tf, &valid_p, &valid_h, Alignment::Cross)?,
                e,
                l_p,
                l_h,
            )
        }
        Alignment::AsPrinted => {
            let common = l_p.max(l_h);
            let pad_rows = |tape: &mut Tape<T>, x: TensorId, len: usize| -> Result<TensorId, TensorError> {
                if len == common {
                    return Ok(x);
                }
                let zeros = tape.constant(Tensor::zeros(vec![common - len, dims.encoder.d_model])?);
                tape.concat(0, &[x, zeros])
            };
            let p_pad = pad_rows(tape, p_tf, l_p)?;
            let h_pad = pad_rows(tape, h_tf, l_h)?;
            let mut mask_p = vec![true; l_p];
            mask_p.resize(common, false);
            let mut mask_h = vec![true; l_h];
            mask_h.resize(common, false);
            let mut m_sq = vec![T::zero(); common * common];
            for i in 0..l_p {
                for j in 0..l_h {
                    m_sq[i * common + j] = T::from_f64(f64::from(m.get(i, j)));
                }
            }
            let m_node = tape.constant(Tensor::new(vec![common, common], m_sq)?);
            let e = fusion::fused_scores(tape, p_pad, h_pad, m_node, bound.gamma)?;
            (
                fusion::cross_align_with_weights(tape, e, p_pad, h_pad, &mask_p, &mask_h, Alignment::AsPrinted)?,
                e,
                common,
                common,
            )
        }
    };

    let p_hat = if p_len == l_p {
        align.p_hat
    } else {
        tape.slice(align.p_hat, 0, 0, l_p)?
    };
    let h_hat = if h_len == l_h {
        align.h_hat
    } else {
        tape.slice(align.h_hat, 0, 0, l_h)?
    };

    let p_bi = head::bilstm_encode(tape, p_hat, &bound.bilstm, l_p)?;
    let h_bi = head::bilstm_encode(tape, h_hat, &bound.bilstm, l_h)?;
    let p_rep = head::pool_features(tape, p_tf, p_bi, l_p)?;
    let h_rep = head::pool_features(tape, h_tf, h_bi, l_h)?;
    let h_feat = head::assemble_feature(tape, p_rep, h_rep, &sums)?;
    let probs = head::predict(tape, h_feat, &bound.head)?;
    let p1_slice = tape.slice(probs, 0, 1, 1)?;
    let p1 = tape.reshape(p1_slice, vec![])?;
    let cosine = if options.want_cosine {
        Some(head::cosine_similarity(tape, p_rep, h_rep)?)
    } else {
        None
    };

    Ok(PairForward {
        p_tf,
        h_tf,
        e,
        weights_p: align.weights_p,
        weights_h: align.weights_h,
        p_rep,
        h_rep,
        h_feat,
        probs,
        p1,
        cosine,
    })
}
