use super::{dot, Tensor};
use crate::error::{shape_err, Result};
use crate::Scalar;

pub const DEFAULT_L2_EPSILON: f64 = 1e-12;

/// `x / max(‖x‖₂, epsilon)`
pub fn l2_normalize_slice<T: Scalar>(x: &[T], epsilon: T) -> Vec<T> {
    let norm = dot(x, x).sqrt().max(epsilon);
    x.iter().map(|&v| v / norm).collect()
}

/// Normalizes the whole tensor as one vector.
pub fn l2_normalize<T: Scalar>(input: &Tensor<T>, epsilon: T) -> Tensor<T> {
    Tensor::from_vec(input.shape(), l2_normalize_slice(input.values(), epsilon))
        .expect("shape is preserved")
}

/// Gradient with respect to `x` of `l2_normalize_slice(x, epsilon)`.
pub fn l2_normalize_backward<T: Scalar>(x: &[T], epsilon: T, grad_out: &[T]) -> Result<Vec<T>> {
    if x.len() != grad_out.len() {
        return Err(shape_err!(
            "l2 normalize: input length {} vs gradient length {}",
            x.len(),
            grad_out.len()
        ));
    }
    let norm = dot(x, x).sqrt();
    if norm < epsilon {
        return Ok(grad_out.iter().map(|&g| g / epsilon).collect());
    }
    // (I − y yᵀ) g / ‖x‖ with y = x / ‖x‖
    let proj = dot(x, grad_out) / (norm * norm);
    Ok(x
        .iter()
        .zip(grad_out)
        .map(|(&xv, &g)| (g - xv * proj) / norm)
        .collect())
}
