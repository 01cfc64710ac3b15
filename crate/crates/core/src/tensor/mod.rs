//! Dense tensors with a gradient slot, plus the differentiable operations the
//! segmentation pipeline is assembled from.
//!
//! Every operation comes as a forward function and a matching `*_backward`
//! function. Backward functions read the gradient of the operation's output
//! and accumulate into the `grad` slot of its inputs and parameters, so a
//! chain is differentiated by walking it in reverse.

mod conv;
mod elementwise;
mod gemm;
mod loss;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_backward, conv_output_extent, ConvLayer};
pub use elementwise::{
    concat_channels, concat_channels_backward, dropout, dropout_backward, eltwise_sum,
    eltwise_sum_backward, relu, relu_backward, split_channels, zero_pad, zero_pad_backward,
    DropoutMask,
};
pub use loss::{softmax, softmax_xent, softmax_xent_batch};
pub use norm::{l2_normalize, l2_normalize_backward, l2_normalize_slice, DEFAULT_L2_EPSILON};
pub use pool::{maxpool, maxpool_backward, pool_output_extent, ArgmaxMap};

use crate::error::{shape_err, Result};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Zero-filled tensor. Panics if any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient slot, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            ));
        }
        for (dst, &src) in self.grad_mut().iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    /// Resets the gradient to zeros, keeping the allocation.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interprets the tensor as C×H×W.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected a C×H×W tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at (channel, row, col) of a C×H×W tensor.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.values[(c * h + y) * w + x]
    }

    pub fn l2_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
