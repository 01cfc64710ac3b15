use rand::Rng;

use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

fn check_len<T>(what: &str, expected: usize, grad_out: &[T]) -> Result<()> {
    if grad_out.len() != expected {
        return Err(shape_err!(
            "{what}: output gradient of length {} where {expected} was expected",
            grad_out.len()
        ));
    }
    Ok(())
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let values = input.values().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(input.shape(), values).expect("shape is preserved")
}

/// Passes gradient where the input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &mut Tensor<T>, grad_out: &[T]) -> Result<()> {
    check_len("relu", input.len(), grad_out)?;
    let mask: Vec<bool> = input.values().iter().map(|&v| v > T::zero()).collect();
    for ((d, &g), on) in input.grad_mut().iter_mut().zip(grad_out).zip(mask) {
        if on {
            *d += g;
        }
    }
    Ok(())
}

pub fn eltwise_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "eltwise sum of {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), values)
}

/// Both addends receive the incoming gradient unchanged.
pub fn eltwise_sum_backward<T: Scalar>(
    a: &mut Tensor<T>,
    b: &mut Tensor<T>,
    grad_out: &[T],
) -> Result<()> {
    a.accumulate_grad(grad_out)?;
    b.accumulate_grad(grad_out)
}

/// Concatenates C×H×W tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| invalid!("concat needs at least one tensor"))?;
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    for p in parts {
        let (c, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(shape_err!(
                "concat of spatial sizes {h}×{w} and {ph}×{pw}"
            ));
        }
        channels += c;
    }
    let mut values = Vec::with_capacity(channels * h * w);
    for p in parts {
        values.extend_from_slice(p.values());
    }
    Tensor::from_vec(&[channels, h, w], values)
}

pub fn concat_channels_backward<T: Scalar>(
    parts: &mut [&mut Tensor<T>],
    grad_out: &[T],
) -> Result<()> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    check_len("concat", total, grad_out)?;
    let mut offset = 0;
    for p in parts.iter_mut() {
        let n = p.len();
        p.accumulate_grad(&grad_out[offset..offset + n])?;
        offset += n;
    }
    Ok(())
}

/// Splits a C×H×W tensor into consecutive channel groups of the given sizes.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = input.dims3()?;
    if sizes.iter().sum::<usize>() != c || sizes.iter().any(|&s| s == 0) {
        return Err(shape_err!("cannot split {c} channels into {sizes:?}"));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let len = s * h * w;
        out.push(Tensor::from_vec(
            &[s, h, w],
            input.values()[start..start + len].to_vec(),
        )?);
        start += len;
    }
    Ok(out)
}

/// Appends `bottom` zero rows and `right` zero columns.
pub fn zero_pad<T: Scalar>(input: &Tensor<T>, bottom: usize, right: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (ph, pw) = (h + bottom, w + right);
    let mut values = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * ph + y) * pw;
            values[dst..dst + w].copy_from_slice(&input.values()[src..src + w]);
        }
    }
    Tensor::from_vec(&[c, ph, pw], values)
}

pub fn zero_pad_backward<T: Scalar>(
    input: &mut Tensor<T>,
    bottom: usize,
    right: usize,
    grad_out: &[T],
) -> Result<()> {
    let (c, h, w) = input.dims3()?;
    let (ph, pw) = (h + bottom, w + right);
    check_len("zero pad", c * ph * pw, grad_out)?;
    let dinput = input.grad_mut();
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * ph + y) * pw;
            let dst = (ch * h + y) * w;
            for x in 0..w {
                dinput[dst + x] += grad_out[src + x];
            }
        }
    }
    Ok(())
}

/// Multiplicative dropout mask: 0 for dropped units, `1/keep` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    scale: Vec<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn scale(&self) -> &[T] {
        &self.scale
    }
}

/// Inverted dropout: surviving units are scaled by `1/keep` at train time.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    keep: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(invalid!("dropout keep probability must lie in (0, 1], got {keep}"));
    }
    let kept = T::lit(1.0 / keep);
    let scale: Vec<T> = (0..input.len())
        .map(|_| if keep >= 1.0 || rng.gen::<f64>() < keep { kept } else { T::zero() })
        .collect();
    let values = input
        .values()
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| v * s)
        .collect();
    Ok((Tensor::from_vec(input.shape(), values)?, DropoutMask { scale }))
}

pub fn dropout_backward<T: Scalar>(
    input: &mut Tensor<T>,
    mask: &DropoutMask<T>,
    grad_out: &[T],
) -> Result<()> {
    check_len("dropout", mask.scale.len(), grad_out)?;
    let g: Vec<T> = grad_out.iter().zip(&mask.scale).map(|(&g, &s)| g * s).collect();
    input.accumulate_grad(&g)
}
