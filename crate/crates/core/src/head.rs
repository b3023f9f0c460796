//! Aggregation and prediction: BiLSTM re-encoding of the aligned
//! representations, max/avg pooling over valid positions, assembly of the
//! classifier feature (including the interaction-matrix row/column sums)
//! and the loss functions.

use crate::scalar::Scalar;
use crate::sememe::SememeSums;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// ε-clamp applied to probabilities inside the cross-entropy, which is
/// undefined at exactly 0 or 1.
pub const CE_EPSILON: f64 = 1e-7;
/// Default scale for the pairwise ranking loss.
pub const COSENT_TAU: f64 = 20.0;

/// One LSTM direction. Weights follow gate order [input, forget, cell,
/// output] stacked along the first axis: w_x is 4h×d_in, w_h is 4h×h,
/// b is 4h.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellParams {
    pub w_x: TensorId,
    pub w_h: TensorId,
    pub b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmParams {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
}

/// Two affine layers with a tanh between and softmax on top.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Hidden states (h×1 column per position, original order) of one scan
/// direction over the first `n_valid` rows of `x`.
fn lstm_scan<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    cell: &LstmCellParams,
    n_valid: usize,
    reverse: bool,
) -> Result<Vec<TensorId>, TensorError> {
    let h = tape.value(cell.w_h).shape()[1];
    let b_col = tape.reshape(cell.b, vec![4 * h, 1])?;
    let zeros = Tensor::zeros(vec![h, 1])?;
    let mut h_prev = tape.constant(zeros.clone());
    let mut c_prev = tape.constant(zeros);
    let mut states = vec![None; n_valid];
    let order: Vec<usize> = if reverse {
        (0..n_valid).rev().collect()
    } else {
        (0..n_valid).collect()
    };
    for t in order {
        let row = tape.slice(x, 0, t, 1)?;
        let x_col = tape.transpose(row)?;
        let from_x = tape.matmul(cell.w_x, x_col)?;
        let from_h = tape.matmul(cell.w_h, h_prev)?;
        let pre = tape.add(from_x, from_h)?;
        let gates = tape.add(pre, b_col)?;
        let i_gate = tape.slice(gates, 0, 0, h)?;
        let f_gate = tape.slice(gates, 0, h, h)?;
        let g_cand = tape.slice(gates, 0, 2 * h, h)?;
        let o_gate = tape.slice(gates, 0, 3 * h, h)?;
        let i_gate = tape.sigmoid(i_gate)?;
        let f_gate = tape.sigmoid(f_gate)?;
        let g_cand = tape.tanh(g_cand)?;
        let o_gate = tape.sigmoid(o_gate)?;
        let keep = tape.mul(f_gate, c_prev)?;
        let write = tape.mul(i_gate, g_cand)?;
        let c = tape.add(keep, write)?;
        let c_act = tape.tanh(c)?;
        let h_new = tape.mul(o_gate, c_act)?;
        states[t] = Some(h_new);
        h_prev = h_new;
        c_prev = c;
    }
    Ok(states.into_iter().map(|s| s.expect("all positions visited")).collect())
}

/// BiLSTM over the valid prefix of `x` (len×d_in): forward and backward
/// hidden states concatenated per position, zeros at padded positions.
pub fn bilstm_encode<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    params: &BiLstmParams,
    n_valid: usize,
) -> Result<TensorId, TensorError> {
    let len = tape.value(x).shape()[0];
    let h = tape.value(params.fwd.w_h).shape()[1];
    assert!(n_valid >= 1 && n_valid <= len, "valid prefix out of range");
    let fwd = lstm_scan(tape, x, &params.fwd, n_valid, false)?;
    let bwd = lstm_scan(tape, x, &params.bwd, n_valid, true)?;
    let mut rows = Vec::with_capacity(len);
    for t in 0..n_valid {
        let f_row = tape.transpose(fwd[t])?;
        let b_row = tape.transpose(bwd[t])?;
        rows.push(tape.concat(1, &[f_row, b_row])?);
    }
    for _ in n_valid..len {
        rows.push(tape.constant(Tensor::zeros(vec![1, 2 * h])?));
    }
    tape.concat(0, &rows)
}

/// Pools the concatenation of encoder and BiLSTM features over the valid
/// prefix: [maxpool; avgpool], a vector of length 2·(d + 2h).
pub fn pool_features<T: Scalar>(
    tape: &mut Tape<T>,
    x_tf: TensorId,
    x_bilstm: TensorId,
    n_valid: usize,
) -> Result<TensorId, TensorError> {
    let x_o = tape.concat(1, &[x_tf, x_bilstm])?;
    let valid = tape.slice(x_o, 0, 0, n_valid)?;
    let maxed = tape.reduce_max(valid, 0)?;
    let avged = tape.reduce_mean(valid, 0)?;
    tape.concat(0, &[maxed, avged])
}

/// Classifier input: [P_rep; H_rep; P_rep−H_rep; HN_col; HN_row], the HN
/// segments zero-padded to the model's maximum length.
pub fn assemble_feature<T: Scalar>(
    tape: &mut Tape<T>,
    p_rep: TensorId,
    h_rep: TensorId,
    sums: &SememeSums,
) -> Result<TensorId, TensorError> {
    let diff = tape.sub(p_rep, h_rep)?;
    let to_tensor = |v: &[u32]| {
        Tensor::new(
            vec![v.len()],
            v.iter().map(|&c| T::from_f64(f64::from(c))).collect(),
        )
    };
    let hn_col = tape.constant(to_tensor(&sums.hn_col)?);
    let hn_row = tape.constant(to_tensor(&sums.hn_row)?);
    tape.concat(0, &[p_rep, h_rep, diff, hn_col, hn_row])
}

/// Two affine layers, tanh between, softmax out: a probability pair
/// (p₀, p₁) summing to 1.
pub fn predict<T: Scalar>(
    tape: &mut Tape<T>,
    h_feat: TensorId,
    head: &HeadParams,
) -> Result<TensorId, TensorError> {
    let n = tape.value(h_feat).numel();
    let x = tape.reshape(h_feat, vec![1, n])?;
    let z = tape.matmul(x, head.w1)?;
    let z = tape.add_rowvec(z, head.b1)?;
    let z = tape.tanh(z)?;
    let logits = tape.matmul(z, head.w2)?;
    let logits = tape.add_rowvec(logits, head.b2)?;
    let probs = tape.softmax(logits, 1, None)?;
    tape.reshape(probs, vec![2])
}

/// Decision rule: label 1 iff p₁ ≥ 0.5 (exact ties resolve to 1).
pub fn decide<T: Scalar>(p1: T) -> u8 {
    if p1 >= T::from_f64(0.5) {
        1
    } else {
        0
    }
}

/// Mean binary cross-entropy over per-example positive-class probability
/// nodes, built on the tape so it backpropagates.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    p1_nodes: &[TensorId],
    labels: &[u8],
) -> Result<TensorId, TensorError> {
    assert_eq!(p1_nodes.len(), labels.len(), "one label per probability");
    if p1_nodes.is_empty() {
        return Err(TensorError::BadShape {
            op: "cross_entropy",
            shape: vec![0],
        });
    }
    let n = p1_nodes.len();
    let mut scalars = Vec::with_capacity(n);
    for &p in p1_nodes {
        scalars.push(tape.reshape(p, vec![1])?);
    }
    let p = tape.concat(0, &scalars)?;
    let eps = T::from_f64(CE_EPSILON);
    let pc = tape.clamp(p, eps, T::one() - eps)?;
    let y = tape.constant(Tensor::new(
        vec![n],
        labels.iter().map(|&l| T::from_f64(f64::from(l))).collect(),
    )?);
    let one_minus_y = tape.constant(Tensor::new(
        vec![n],
        labels.iter().map(|&l| T::from_f64(1.0 - f64::from(l))).collect(),
    )?);
    let ones = tape.constant(Tensor::new(vec![n], vec![T::one(); n])?);
    let log_p = tape.log(pc)?;
    let pos_term = tape.mul(y, log_p)?;
    let q = tape.sub(ones, pc)?;
    let log_q = tape.log(q)?;
    let neg_term = tape.mul(one_minus_y, log_q)?;
    let summed = tape.add(pos_term, neg_term)?;
    let mean = tape.reduce_mean(summed, 0)?;
    tape.scale(mean, -T::one())
}

/// Plain-value mean binary cross-entropy (evaluation path, no tape).
pub fn cross_entropy_value(p1: &[f64], labels: &[u8]) -> f64 {
    assert!(!p1.is_empty(), "empty batch");
    let total: f64 = p1
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / p1.len() as f64
}

/// Cosine similarity of two feature vectors, on the tape.
pub fn cosine_similarity<T: Scalar>(
    tape: &mut Tape<T>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    let tiny = tape.constant(Tensor::scalar(T::from_f64(1e-12)));
    let prod = tape.mul(a, b)?;
    let dot = tape.reduce_sum(prod, 0)?;
    let aa = tape.mul(a, a)?;
    let na2 = tape.reduce_sum(aa, 0)?;
    let na2 = tape.add(na2, tiny)?;
    let na = tape.sqrt(na2)?;
    let bb = tape.mul(b, b)?;
    let nb2 = tape.reduce_sum(bb, 0)?;
    let nb2 = tape.add(nb2, tiny)?;
    let nb = tape.sqrt(nb2)?;
    let denom = tape.mul(na, nb)?;
    tape.div(dot, denom)
}

/// Pairwise ranking loss log(1 + Σ_{y_i=0, y_j=1} exp(τ·(s_i − s_j))) and
/// its gradient with respect to each score. The double sum factorizes into
/// (Σ_neg e^{τs})·(Σ_pos e^{−τs}), evaluated with max-shifts for stability.
/// A batch without any (negative, positive) pair has zero loss and zero
/// gradient.
pub fn cosent_loss_with_grad(scores: &[f64], labels: &[u8], tau: f64) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), labels.len());
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    if neg.is_empty() || pos.is_empty() {
        return (0.0, vec![0.0; scores.len()]);
    }
    // A = Σ_neg e^{τ s_i} = e^{a_max}·A', B = Σ_pos e^{−τ s_j} = e^{b_max}·B'
    let a_max = neg.iter().map(|&i| tau * scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let b_max = pos.iter().map(|&j| -tau * scores[j]).fold(f64::NEG_INFINITY, f64::max);
    let a_rest: f64 = neg.iter().map(|&i| (tau * scores[i] - a_max).exp()).sum();
    let b_rest: f64 = pos.iter().map(|&j| (-tau * scores[j] - b_max).exp()).sum();
    // ln(A·B) and loss = log(1 + e^t), computed as a stable softplus
    let t = a_max + b_max + a_rest.ln() + b_rest.ln();
    let loss = if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    };
    // sigmoid(t) = A·B / (1 + A·B)
    let sig = 1.0 / (1.0 + (-t).exp());
    let mut grad = vec![0.0; scores.len()];
    for &i in &neg {
        // softmax over negative scores times the shared factor
        grad[i] = tau * sig * (tau * scores[i] - a_max).exp() / a_rest;
    }
    for &j in &pos {
        grad[j] = -tau * sig * (-tau * scores[j] - b_max).exp() / b_rest;
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn zero_cell(tape: &mut Tape<f64>, d_in: usize, h: usize) -> LstmCellParams {
        LstmCellParams {
            w_x: tape.leaf(Tensor::zeros(vec![4 * h, d_in]).unwrap(), true),
            w_h: tape.leaf(Tensor::zeros(vec![4 * h, h]).unwrap(), true),
            b: tape.leaf(Tensor::zeros(vec![4 * h]).unwrap(), true),
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        // gates sit at 0.5 but the candidate is tanh(0)=0, so c and h stay 0
        let mut tape = Tape::new();
        let params = BiLstmParams {
            fwd: zero_cell(&mut tape, 3, 2),
            bwd: zero_cell(&mut tape, 3, 2),
        };
        let x = tape.constant(t2(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]));
        let y = bilstm_encode(&mut tape, x, &params, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_position_forward_equals_backward_half() {
        let mut tape = Tape::new();
        let w_x = tape.constant(t2(&(0..8).map(|i| vec![0.1 * i as f64, -0.05 * i as f64]).collect::<Vec<_>>()));
        let w_h = tape.constant(t2(&(0..8).map(|i| vec![0.02 * i as f64, 0.01]).collect::<Vec<_>>()));
        let b = tape.constant(t1(&[0.1, -0.1, 0.2, 0.0, 0.05, 0.3, -0.2, 0.15]));
        let cell = LstmCellParams { w_x, w_h, b };
        let params = BiLstmParams { fwd: cell, bwd: cell };
        let x = tape.constant(t2(&[vec![0.7, -0.4]]));
        let y = bilstm_encode(&mut tape, x, &params, 1).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d.len(), 4);
        assert_eq!(d[0], d[2], "one step: both directions see the same input");
        assert_eq!(d[1], d[3]);
    }

    #[test]
    fn two_step_scalar_cell_matches_manual_recurrence() {
        // d_in = 1, h = 1: recurrence small enough to evaluate by hand
        let wx = [0.6, -0.4, 1.1, 0.9]; // gate order i, f, g, o
        let wh = [0.3, 0.2, -0.5, 0.7];
        let bias = [0.05, -0.1, 0.2, 0.0];
        let xs = [0.8, -1.2];

        let mut tape = Tape::new();
        let w_x = tape.constant(Tensor::new(vec![4, 1], wx.to_vec()).unwrap());
        let w_h = tape.constant(Tensor::new(vec![4, 1], wh.to_vec()).unwrap());
        let b = tape.constant(t1(&bias));
        let cell = LstmCellParams { w_x, w_h, b };
        let params = BiLstmParams { fwd: cell, bwd: cell };
        let x = tape.constant(t2(&[vec![xs[0]], vec![xs[1]]]));
        let y = bilstm_encode(&mut tape, x, &params, 2).unwrap();
        let got = tape.value(y).data();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let step = |x: f64, h: f64, c: f64| -> (f64, f64) {
            let i = sigmoid(wx[0] * x + wh[0] * h + bias[0]);
            let f = sigmoid(wx[1] * x + wh[1] * h + bias[1]);
            let g = (wx[2] * x + wh[2] * h + bias[2]).tanh();
            let o = sigmoid(wx[3] * x + wh[3] * h + bias[3]);
            let c_new = f * c + i * g;
            (o * c_new.tanh(), c_new)
        };
        let (hf0, cf0) = step(xs[0], 0.0, 0.0);
        let (hf1, _) = step(xs[1], hf0, cf0);
        let (hb1, cb1) = step(xs[1], 0.0, 0.0);
        let (hb0, _) = step(xs[0], hb1, cb1);
        // rows are [h_fwd[t], h_bwd[t]]
        let expect = [hf0, hb0, hf1, hb1];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "got {g}, want {e}");
        }
    }

    #[test]
    fn padded_positions_output_zeros_and_ignore_content() {
        let run = |junk: f64| {
            let mut tape = Tape::new();
            let w_x = tape.constant(t2(&(0..8).map(|i| vec![0.1 * i as f64, 0.07]).collect::<Vec<_>>()));
            let w_h = tape.constant(t2(&(0..8).map(|i| vec![0.05, 0.02 * i as f64]).collect::<Vec<_>>()));
            let b = tape.constant(t1(&[0.0; 8]));
            let cell = LstmCellParams { w_x, w_h, b };
            let params = BiLstmParams { fwd: cell, bwd: cell };
            let x = tape.constant(t2(&[vec![0.3, -0.6], vec![junk, junk]]));
            let y = bilstm_encode(&mut tape, x, &params, 1).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run(0.0);
        let b = run(1234.5);
        assert_eq!(a, b, "padded content must not matter");
        assert!(a[4..].iter().all(|&v| v == 0.0), "padded rows are zeros");
    }

    #[test]
    fn constant_rows_make_max_equal_avg() {
        let mut tape = Tape::new();
        let x_tf = tape.constant(t2(&[vec![0.4, -0.2], vec![0.4, -0.2]]));
        let x_bi = tape.constant(t2(&[vec![1.5], vec![1.5]]));
        let rep = pool_features(&mut tape, x_tf, x_bi, 2).unwrap();
        assert_eq!(tape.value(rep).data(), &[0.4, -0.2, 1.5, 0.4, -0.2, 1.5]);
    }

    #[test]
    fn single_row_pools_to_itself_twice() {
        let mut tape = Tape::new();
        let x_tf = tape.constant(t2(&[vec![0.9, 0.1]]));
        let x_bi = tape.constant(t2(&[vec![-0.5]]));
        let rep = pool_features(&mut tape, x_tf, x_bi, 1).unwrap();
        assert_eq!(tape.value(rep).data(), &[0.9, 0.1, -0.5, 0.9, 0.1, -0.5]);
    }

    #[test]
    fn pooling_ignores_padded_rows() {
        let mut tape = Tape::new();
        let x_tf = tape.constant(t2(&[vec![0.4, -0.2], vec![99.0, 99.0]]));
        let x_bi = tape.constant(t2(&[vec![1.5], vec![99.0]]));
        let rep = pool_features(&mut tape, x_tf, x_bi, 1).unwrap();
        // identical to pooling with the padded row removed
        let mut tape2 = Tape::new();
        let t_tf = tape2.constant(t2(&[vec![0.4, -0.2]]));
        let t_bi = tape2.constant(t2(&[vec![1.5]]));
        let rep2 = pool_features(&mut tape2, t_tf, t_bi, 1).unwrap();
        assert_eq!(tape.value(rep).data(), tape2.value(rep2).data());
    }

    #[test]
    fn equal_reps_zero_the_difference_segment() {
        let mut tape = Tape::new();
        let p = tape.constant(t1(&[0.3, -0.7]));
        let h = tape.constant(t1(&[0.3, -0.7]));
        let sums = SememeSums {
            hn_row: vec![1, 0, 2],
            hn_col: vec![0, 3, 0],
        };
        let feat = tape.assemble(p, h, &sums);
        let d = tape.value(feat).data();
        assert_eq!(&d[4..6], &[0.0, 0.0], "difference segment");
        assert_eq!(&d[6..9], &[0.0, 3.0, 0.0], "HN_col first");
        assert_eq!(&d[9..12], &[1.0, 0.0, 2.0], "HN_row second");
    }

    // small extension trait so the test above reads naturally
    trait AssembleExt {
        fn assemble(&mut self, p: TensorId, h: TensorId, sums: &SememeSums) -> TensorId;
    }
    impl AssembleExt for Tape<f64> {
        fn assemble(&mut self, p: TensorId, h: TensorId, sums: &SememeSums) -> TensorId {
            assemble_feature(self, p, h, sums).unwrap()
        }
    }

    #[test]
    fn zero_matrix_reduces_feature_to_neural_parts() {
        let mut tape = Tape::new();
        let p = tape.constant(t1(&[1.0, 2.0]));
        let h = tape.constant(t1(&[0.5, 0.5]));
        let sums = SememeSums {
            hn_row: vec![0; 3],
            hn_col: vec![0; 3],
        };
        let feat = tape.assemble(p, h, &sums);
        let d = tape.value(feat).data();
        assert!(d[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_length_arithmetic() {
        // pooled reps of length 2·(d + 2h) with d = 4, 2h = 2 → 12 each;
        // h_feat = 3·12 + 2·max_len with max_len = 3 → 42
        let mut tape = Tape::new();
        let p = tape.constant(t1(&vec![0.1; 12]));
        let h = tape.constant(t1(&vec![0.2; 12]));
        let sums = SememeSums {
            hn_row: vec![0; 3],
            hn_col: vec![0; 3],
        };
        let feat = tape.assemble(p, h, &sums);
        assert_eq!(tape.value(feat).numel(), 42);
    }

    #[test]
    fn mismatched_rep_lengths_error() {
        let mut tape = Tape::new();
        let p = tape.constant(t1(&[1.0, 2.0]));
        let h = tape.constant(t1(&[0.5]));
        let sums = SememeSums {
            hn_row: vec![0],
            hn_col: vec![0],
        };
        assert!(matches!(
            assemble_feature(&mut tape, p, h, &sums),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    fn head_with(tape: &mut Tape<f64>, w1: Tensor<f64>, b1: Tensor<f64>, w2: Tensor<f64>, b2: Tensor<f64>) -> HeadParams {
        HeadParams {
            w1: tape.constant(w1),
            b1: tape.constant(b1),
            w2: tape.constant(w2),
            b2: tape.constant(b2),
        }
    }

    #[test]
    fn zero_head_predicts_half_half() {
        let mut tape = Tape::new();
        let head = head_with(
            &mut tape,
            Tensor::zeros(vec![3, 2]).unwrap(),
            Tensor::zeros(vec![2]).unwrap(),
            Tensor::zeros(vec![2, 2]).unwrap(),
            Tensor::zeros(vec![2]).unwrap(),
        );
        let feat = tape.constant(t1(&[0.4, -0.1, 0.9]));
        let probs = predict(&mut tape, feat, &head).unwrap();
        assert_eq!(tape.value(probs).data(), &[0.5, 0.5]);
        assert_eq!(decide(0.5), 1, "exact tie resolves to label 1");
    }

    #[test]
    fn known_logits_give_quarter_three_quarters() {
        // zero hidden layer, bias picks the logits (0, ln 3)
        let mut tape = Tape::new();
        let head = head_with(
            &mut tape,
            Tensor::zeros(vec![1, 1]).unwrap(),
            Tensor::zeros(vec![1]).unwrap(),
            Tensor::zeros(vec![1, 2]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap(),
        );
        let feat = tape.constant(t1(&[0.0]));
        let probs = predict(&mut tape, feat, &head).unwrap();
        let d = tape.value(probs).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn probabilities_are_strictly_inside_unit_interval() {
        let mut tape = Tape::new();
        let head = head_with(
            &mut tape,
            Tensor::new(vec![2, 2], vec![3.0, -2.0, 1.0, 4.0]).unwrap(),
            Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
            Tensor::new(vec![2, 2], vec![2.0, -2.0, -2.0, 2.0]).unwrap(),
            Tensor::zeros(vec![2]).unwrap(),
        );
        let feat = tape.constant(t1(&[5.0, -5.0]));
        let probs = predict(&mut tape, feat, &head).unwrap();
        let d = tape.value(probs).data();
        assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((d[0] + d[1] - 1.0).abs() < 1e-6);
    }

    fn ce_of(p1: &[f64], labels: &[u8]) -> f64 {
        let mut tape = Tape::new();
        let nodes: Vec<TensorId> = p1
            .iter()
            .map(|&p| tape.leaf(Tensor::scalar(p), true))
            .collect();
        let loss = cross_entropy(&mut tape, &nodes, labels).unwrap();
        tape.value(loss).item().unwrap()
    }

    #[test]
    fn confident_correct_prediction_has_epsilon_loss() {
        let loss = ce_of(&[1.0], &[1]);
        assert!(loss > 0.0 && loss < 2e-7, "clamped log(1-1e-7) ≈ 1e-7, got {loss}");
    }

    #[test]
    fn coin_flip_loss_is_ln_two() {
        assert!((ce_of(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce_of(&[0.5], &[0]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn two_example_batch_hand_value() {
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((ce_of(&[0.9, 0.2], &[1, 0]) - expect).abs() < 1e-12);
        assert!((expect - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        assert!(cross_entropy(&mut tape, &[], &[]).is_err());
    }

    #[test]
    fn ce_value_matches_tape_ce() {
        let p = [0.73, 0.11, 0.98];
        let y = [1, 0, 1];
        assert!((cross_entropy_value(&p, &y) - ce_of(&p, &y)).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        let mut tape = Tape::new();
        let a = tape.constant(t1(&[1.0, 2.0, 3.0]));
        let b = tape.constant(t1(&[2.0, 4.0, 6.0]));
        let c = cosine_similarity(&mut tape, a, b).unwrap();
        assert!((tape.value(c).item().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosent_all_same_label_is_zero() {
        let (loss, grad) = cosent_loss_with_grad(&[0.2, 0.9, 0.5], &[1, 1, 1], COSENT_TAU);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cosent_well_ordered_pair_is_tiny() {
        let (loss, _) = cosent_loss_with_grad(&[0.2, 0.9], &[0, 1], 20.0);
        let expect = (1f64 + (-14f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 8.3153e-7).abs() < 1e-10);
    }

    #[test]
    fn cosent_inverted_pair_is_large() {
        let (loss, _) = cosent_loss_with_grad(&[0.9, 0.2], &[0, 1], 20.0);
        let expect = (1f64 + 14f64.exp()).ln();
        assert!((loss - expect).abs() < 1e-9);
        assert!((loss - 14.0).abs() < 1e-5);
    }

    #[test]
    fn cosent_gradient_matches_finite_differences() {
        let scores = [0.31, -0.2, 0.77, 0.05];
        let labels = [0, 1, 1, 0];
        let (_, grad) = cosent_loss_with_grad(&scores, &labels, 5.0);
        let eps = 1e-7;
        for i in 0..scores.len() {
            let mut plus = scores;
            plus[i] += eps;
            let mut minus = scores;
            minus[i] -= eps;
            let (lp, _) = cosent_loss_with_grad(&plus, &labels, 5.0);
            let (lm, _) = cosent_loss_with_grad(&minus, &labels, 5.0);
            let num = (lp - lm) / (2.0 * eps);
            assert!(
                (grad[i] - num).abs() < 1e-6,
                "score {i}: analytic {} vs numeric {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn max_pool_component_is_monotone_in_valid_inputs() {
        let base = [[0.4, -0.2], [0.1, 0.9]];
        let pool = |bump: f64| {
            let mut tape = Tape::new();
            let mut rows: Vec<Vec<f64>> = base.iter().map(|r| r.to_vec()).collect();
            rows[1][0] += bump;
            let x_tf = tape.constant(t2(&rows));
            let x_bi = tape.constant(t2(&[vec![0.0], vec![0.0]]));
            let rep = pool_features(&mut tape, x_tf, x_bi, 2).unwrap();
            tape.value(rep).data().to_vec()
        };
        let before = pool(0.0);
        let after = pool(0.7);
        assert!(after[0] >= before[0]);
    }
}
