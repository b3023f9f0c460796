//! Central finite-difference verification of tape gradients.
//!
//! Only meaningful in f64: at f32 the truncation and roundoff floors of the
//! central difference overlap, so every correctness suite runs the checker
//! on 64-bit tensors.

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Outcome of a finite-difference sweep over one input tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Worst componentwise relative error, denominator
    /// `max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_err: f64,
    /// Flat index the worst error occurred at.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Checks the tape gradient of `f` at `x0` against central differences.
///
/// `f` must rebuild the same pure, deterministic computation each call and
/// return a one-element loss node. Non-finite loss values are reported as
/// `TensorError::NonFinite` (a check failure, not a panic).
pub fn finite_diff_check<F>(
    f: F,
    x0: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId, TensorError>,
{
    assert!(eps > 0.0, "eps must be positive");

    let eval = |data: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>), TensorError> {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(x0.shape().to_vec(), data.to_vec())?,
            want_grad,
        );
        let loss = f(&mut tape, x)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                context: "finite_diff_check objective".to_string(),
            });
        }
        let grad = if want_grad {
            tape.backward(loss)?;
            Some(tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| {
                vec![0.0; x0.numel()]
            }))
        } else {
            None
        };
        Ok((v, grad))
    };

    let base = x0.data().to_vec();
    let (_, grad) = eval(&base, true)?;
    let analytic = grad.expect("gradient requested");

    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let (fp, _) = eval(&probe, false)?;
        probe[i] = base[i] - eps;
        let (fm, _) = eval(&probe, false)?;
        probe[i] = base[i];

        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.max_rel_err {
            worst = GradCheck {
                max_rel_err: rel,
                worst_index: i,
                analytic_at_worst: analytic[i],
                numeric_at_worst: numeric,
            };
        }
    }
    Ok(worst)
}
