//! Dense `f64` arithmetic with reverse-mode gradients.

mod tape;
mod tensor;

pub use tape::{Elementwise, Reduce, Tape, Var};
pub use tensor::Tensor;

/// Stable softmax cross-entropy for one row of (possibly margin-augmented)
/// logits. Returns `(-log p_target, p_target)`; when `probs` is given it
/// receives the full softmax.
pub fn xent_row(row: &[f64], target: usize, probs: Option<&mut [f64]>) -> (f64, f64) {
    let mut top = 0;
    for (k, &a) in row.iter().enumerate() {
        if a > row[top] {
            top = k;
        }
    }
    let max = row[top];
    // The top term contributes exactly 1; summing the rest separately keeps
    // log1p accurate when one class dominates.
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, a)| (a - max).exp())
        .sum();
    let denom = 1.0 + rest;
    let log_denom = rest.ln_1p();
    let loss = log_denom - (row[target] - max);
    let p = (row[target] - max).exp() / denom;
    if let Some(probs) = probs {
        for (o, a) in probs.iter_mut().zip(row) {
            *o = (a - max).exp() / denom;
        }
    }
    (loss, p)
}
