use std::borrow::Cow;

use rand::Rng;

use super::gemm::{gemm_acc, transpose};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

/// 2-D convolution layer over C×H×W tensors. Kernel layout is
/// out-channels × in-channels × kh × kw.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub layer_id: String,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    /// Zero-initialized layer.
    pub fn new(
        layer_id: impl Into<String>,
        out_channels: usize,
        in_channels: usize,
        kernel_hw: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(invalid!("stride must be at least 1"));
        }
        if out_channels == 0 || in_channels == 0 || kernel_hw.0 == 0 || kernel_hw.1 == 0 {
            return Err(invalid!("convolution extents must be positive"));
        }
        Ok(ConvLayer {
            layer_id: layer_id.into(),
            kernel: Tensor::zeros(&[out_channels, in_channels, kernel_hw.0, kernel_hw.1]),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    /// Uniform Glorot initialization of the kernel, zero bias.
    pub fn init_xavier<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (kh, kw) = self.kernel_hw();
        let fan_in = (self.in_channels() * kh * kw) as f64;
        let fan_out = (self.out_channels() * kh * kw) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        for v in self.kernel.values_mut() {
            *v = T::lit(rng.gen_range(-limit..limit));
        }
        self.bias.values_mut().iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn zero_grad(&mut self) {
        self.kernel.zero_grad();
        self.bias.zero_grad();
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_hw() == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// floor((n + 2·pad − k) / stride) + 1
pub fn conv_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid!("stride must be at least 1"));
    }
    if n + 2 * pad < k {
        return Err(shape_err!(
            "kernel extent {k} exceeds padded input extent {}",
            n + 2 * pad
        ));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Self> {
        let (c, h, w) = input.dims3()?;
        if c != layer.in_channels() {
            return Err(shape_err!(
                "layer `{}` expects {} input channels, got {c}",
                layer.layer_id,
                layer.in_channels()
            ));
        }
        let (kh, kw) = layer.kernel_hw();
        let oh = conv_output_extent(h, kh, layer.stride, layer.padding)?;
        let ow = conv_output_extent(w, kw, layer.stride, layer.padding)?;
        Ok(Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: layer.stride,
            pad: layer.padding,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_row, out_index, in_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (ch * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.ow + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<'a, T: Scalar>(input: &'a [T], g: &Geometry, pointwise: bool) -> Cow<'a, [T]> {
    if pointwise {
        return Cow::Borrowed(input);
    }
    let p = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    g.for_each_tap(|row, o, i| cols[row * p + o] = input[i]);
    Cow::Owned(cols)
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let g = Geometry::new(input, layer)?;
    let (k, p) = (g.patch_len(), g.out_len());
    let cols = im2col(input.values(), &g, layer.is_pointwise());
    let oc = layer.out_channels();
    let mut out = vec![T::zero(); oc * p];
    for (o, out_row) in out.chunks_exact_mut(p).enumerate() {
        out_row.fill(layer.bias.values()[o]);
    }
    gemm_acc(oc, k, p, layer.kernel.values(), &cols, &mut out);
    Tensor::from_vec(&[oc, g.oh, g.ow], out)
}

/// Accumulates into `layer.kernel`, `layer.bias` and `input` gradients given
/// the gradient of the convolution output.
pub fn conv2d_backward<T: Scalar>(
    input: &mut Tensor<T>,
    layer: &mut ConvLayer<T>,
    grad_out: &[T],
) -> Result<()> {
    let g = Geometry::new(input, layer)?;
    let (k, p) = (g.patch_len(), g.out_len());
    let oc = layer.out_channels();
    if grad_out.len() != oc * p {
        return Err(shape_err!(
            "output gradient of length {} for layer `{}` with output {oc}×{}×{}",
            grad_out.len(),
            layer.layer_id,
            g.oh,
            g.ow
        ));
    }
    let pointwise = layer.is_pointwise();
    let mut dcols = vec![T::zero(); k * p];
    {
        let cols = im2col(input.values(), &g, pointwise);
        // dW = G · colsᵀ, dcols = Wᵀ · G
        let cols_t = transpose(k, p, &cols);
        gemm_acc(oc, p, k, grad_out, &cols_t, layer.kernel.grad_mut());
        let w_t = transpose(oc, k, layer.kernel.values());
        gemm_acc(k, oc, p, &w_t, grad_out, &mut dcols);
        let dbias = layer.bias.grad_mut();
        for o in 0..oc {
            dbias[o] += grad_out[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
    }
    if pointwise {
        input.accumulate_grad(&dcols)?;
    } else {
        let dinput = input.grad_mut();
        g.for_each_tap(|row, o, i| dinput[i] += dcols[row * p + o]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(oc: usize, ic: usize, k: usize, stride: usize, pad: usize, fill: f64) -> ConvLayer<f64> {
        let mut l = ConvLayer::new("t", oc, ic, (k, k), stride, pad).unwrap();
        l.kernel.values_mut().iter_mut().for_each(|v| *v = fill);
        l
    }

    #[test]
    fn all_ones_sum() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let y = conv2d(&x, &layer(1, 1, 3, 1, 0, 1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.values(), &[9.0]);
    }

    #[test]
    fn non_overlapping_windows() {
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = conv2d(&x, &layer(1, 1, 2, 2, 0, 1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.values(), &[0.0 + 1.0 + 4.0 + 5.0, 2.0 + 3.0 + 6.0 + 7.0, 42.0, 50.0]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        assert!(matches!(
            conv2d(&x, &layer(1, 3, 3, 1, 1, 0.0)),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn padding_extends_output() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let y = conv2d(&x, &layer(1, 1, 3, 1, 1, 1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.values(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn stride_equal_kernel_partitions_input() {
        // Each input cell contributes to exactly one output: the input
        // gradient of a unit output gradient is all ones.
        let mut x = Tensor::filled(&[2, 6, 6], 0.5);
        let mut l = layer(3, 2, 3, 3, 0, 1.0);
        let y = conv2d(&x, &l).unwrap();
        let ones = vec![1.0 / 3.0; y.len()];
        conv2d_backward(&mut x, &mut l, &ones).unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn bias_is_added() {
        let x = Tensor::filled(&[1, 2, 2], 1.0);
        let mut l = layer(2, 1, 1, 1, 0, 2.0);
        l.bias.values_mut().copy_from_slice(&[0.5, -1.0]);
        let y = conv2d(&x, &l).unwrap();
        assert_eq!(y.values(), &[2.5, 2.5, 2.5, 2.5, 1.0, 1.0, 1.0, 1.0]);
    }
}
