use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of a softmax over `logits` against `label`.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(invalid!(
            "label {label} out of range for {} classes",
            logits.len()
        ));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    let loss = log_total - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&z| (z - log_total).exp()).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Mean cross-entropy over a K×n×1 batch of logits (one column per sample).
/// The returned gradient is laid out like `logits`.
pub fn softmax_xent_batch<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (k, n, w) = logits.dims3()?;
    if w != 1 || n != labels.len() {
        return Err(shape_err!(
            "expected logits of shape K×{}×1, got {:?}",
            labels.len(),
            logits.shape()
        ));
    }
    let scale = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); k * n];
    let mut column = vec![T::zero(); k];
    for (s, &label) in labels.iter().enumerate() {
        for (c, v) in column.iter_mut().enumerate() {
            *v = logits.values()[c * n + s];
        }
        let (loss, g) = softmax_xent(&column, label)?;
        total += loss;
        for (c, gv) in g.into_iter().enumerate() {
            grad[c * n + s] = gv * scale;
        }
    }
    Ok((total * scale, grad))
}
