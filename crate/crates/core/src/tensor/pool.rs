use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

/// Per-output-cell location of the maximum, as a flat index into the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    indices: Vec<usize>,
}

impl ArgmaxMap {
    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    /// Input (row, col) of the maximum feeding output cell (c, y, x).
    pub fn coords(&self, c: usize, y: usize, x: usize) -> (usize, usize) {
        let [_, oh, ow] = self.output_shape;
        let [_, h, w] = self.input_shape;
        let flat = self.indices[(c * oh + y) * ow + x] - c * h * w;
        (flat / w, flat % w)
    }

    pub fn flat_indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Number of pooling windows along an axis. Windows start every `stride`
/// cells; the last window may hang over the edge and is clipped, so every
/// input cell is covered.
pub fn pool_output_extent(n: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(invalid!("pool window and stride must be at least 1"));
    }
    if window > n {
        return Err(shape_err!("pool window {window} exceeds input extent {n}"));
    }
    Ok((n - window).div_ceil(stride) + 1)
}

/// Max-pooling. Ties resolve to the first cell in row-major order.
pub fn maxpool<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, ArgmaxMap)> {
    let (c, h, w) = input.dims3()?;
    let oh = pool_output_extent(h, window, stride)?;
    let ow = pool_output_extent(w, window, stride)?;
    let src = input.values();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + window).min(h);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + window).min(w);
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = base + y * w + x;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                out.push(src[best]);
                indices.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, oh, ow], out)?,
        ArgmaxMap {
            input_shape: [c, h, w],
            output_shape: [c, oh, ow],
            indices,
        },
    ))
}

/// Routes each output gradient to its argmax input cell.
pub fn maxpool_backward<T: Scalar>(
    input: &mut Tensor<T>,
    argmax: &ArgmaxMap,
    grad_out: &[T],
) -> Result<()> {
    if input.shape() != argmax.input_shape {
        return Err(shape_err!(
            "argmax map was built for input {:?}, got {:?}",
            argmax.input_shape,
            input.shape()
        ));
    }
    if grad_out.len() != argmax.indices.len() {
        return Err(shape_err!(
            "output gradient of length {} for pooled map {:?}",
            grad_out.len(),
            argmax.output_shape
        ));
    }
    let dinput = input.grad_mut();
    for (&i, &g) in argmax.indices.iter().zip(grad_out) {
        dinput[i] += g;
    }
    Ok(())
}
