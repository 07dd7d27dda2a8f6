//! Numerical gradient verification.
//!
//! Central finite differences evaluated through the tape's *forward* pass
//! only, so the check is independent of the backward implementation it
//! verifies. Errors are reported relative to `max(1, |analytic|)`, which
//! avoids blowing up tiny denominators.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor2;
use crate::Result;

/// Builds a scalar loss on `tape` from pre-registered leaves.
pub trait LossBuilder: Fn(&mut Tape, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>> LossBuilder for F {}

fn eval_loss(leaves: &[Tensor2], build: &impl LossBuilder) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    Ok(tape.value(loss)[(0, 0)])
}

/// Analytic gradients of the loss with respect to every leaf, via one
/// forward + backward pass. Returns `(loss, gradients)`.
pub fn analytic_gradients(
    leaves: &[Tensor2],
    build: &impl LossBuilder,
) -> Result<(f64, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    let loss_value = tape.value(loss)[(0, 0)];
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .map(|&id| tape.grad(id).cloned())
        .collect::<Result<_>>()?;
    Ok((loss_value, grads))
}

/// Central-difference gradients `(f(x+eps) - f(x-eps)) / (2 eps)` for every
/// entry of every leaf. Each evaluation rebuilds the tape from scratch.
pub fn numeric_gradients(
    leaves: &[Tensor2],
    eps: f64,
    build: &impl LossBuilder,
) -> Result<Vec<Tensor2>> {
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let (rows, cols) = leaves[li].shape();
        let mut grad = Tensor2::zeros(rows, cols);
        for idx in 0..rows * cols {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[idx] += eps;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[idx] -= eps;
            grad.data_mut()[idx] = (eval_loss(&plus, build)? - eval_loss(&minus, build)?) / (2.0 * eps);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Worst entry-wise relative error between analytic and numeric gradients,
/// with the denominator floored at 1.
pub fn max_rel_error(analytic: &Tensor2, numeric: &Tensor2) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |worst, (&a, &n)| {
            worst.max((a - n).abs() / a.abs().max(1.0))
        })
}

/// Run analytic and finite-difference gradients for `build` and return the
/// worst relative error across all leaves.
pub fn check_gradients(
    leaves: &[Tensor2],
    eps: f64,
    build: impl LossBuilder,
) -> Result<f64> {
    let (_, analytic) = analytic_gradients(leaves, &build)?;
    let numeric = numeric_gradients(leaves, eps, &build)?;
    let worst = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |w, (a, n)| w.max(max_rel_error(a, n)));
    Ok(worst)
}
