use super::net::Registry;
use crate::error::{shape_err, Result};
use crate::tensor::{l2_normalize_backward, l2_normalize_slice, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub layer_id: String,
    pub start: usize,
    pub len: usize,
}

/// Concatenated, per-layer l2-normalized features of one input pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercolumn<T> {
    pub vector: Vec<T>,
    pub segments: Vec<Segment>,
    pub pixel: (usize, usize),
}

impl<T: Scalar> Hypercolumn<T> {
    pub fn segment(&self, layer_id: &str) -> Option<&[T]> {
        self.segments
            .iter()
            .find(|s| s.layer_id == layer_id)
            .map(|s| &self.vector[s.start..s.start + s.len])
    }
}

/// Channel slice of a C×H×W tensor at one cell.
fn cell_slice<T: Scalar>(t: &Tensor<T>, cell: (usize, usize)) -> Vec<T> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..c).map(|ch| t.values()[(ch * h + cell.0) * w + cell.1]).collect()
}

pub fn gather_hypercolumn<T: Scalar>(
    registry: &Registry<T>,
    pixel: (usize, usize),
    epsilon: T,
) -> Result<Hypercolumn<T>> {
    let mut vector = Vec::new();
    let mut segments = Vec::with_capacity(registry.layers().len());
    for (i, info) in registry.layers().iter().enumerate() {
        let cell = registry.track_in(pixel, info)?;
        let raw = cell_slice(registry.layer_at(i), cell);
        segments.push(Segment {
            layer_id: info.id.clone(),
            start: vector.len(),
            len: raw.len(),
        });
        vector.extend(l2_normalize_slice(&raw, epsilon));
    }
    Ok(Hypercolumn {
        vector,
        segments,
        pixel,
    })
}

/// Hypercolumns of several pixels as a D×n×1 tensor, one column per pixel.
pub fn gather_batch<T: Scalar>(
    registry: &Registry<T>,
    pixels: &[(usize, usize)],
    epsilon: T,
) -> Result<Tensor<T>> {
    if pixels.is_empty() {
        return Err(shape_err!("cannot gather an empty batch"));
    }
    let n = pixels.len();
    let columns = pixels
        .iter()
        .map(|&p| gather_hypercolumn(registry, p, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let d = columns[0].vector.len();
    let mut values = vec![T::zero(); d * n];
    for (s, col) in columns.iter().enumerate() {
        for (k, &v) in col.vector.iter().enumerate() {
            values[k * n + s] = v;
        }
    }
    Tensor::from_vec(&[d, n, 1], values)
}

/// Backward of [`gather_batch`]: accumulates into the gradient slots of the
/// registry layers, touching only the tracked cells.
pub fn scatter_batch_grad<T: Scalar>(
    registry: &mut Registry<T>,
    pixels: &[(usize, usize)],
    epsilon: T,
    grad: &[T],
) -> Result<()> {
    let n = pixels.len();
    let depth: usize = registry.layers().iter().map(|l| l.channels).sum();
    if grad.len() != depth * n {
        return Err(shape_err!(
            "hypercolumn gradient of length {} for {n} pixels of depth {depth}",
            grad.len()
        ));
    }
    let infos = registry.layers().to_vec();
    let mut offset = 0;
    for (i, info) in infos.iter().enumerate() {
        let cells = pixels
            .iter()
            .map(|&p| registry.track_in(p, info))
            .collect::<Result<Vec<_>>>()?;
        let t = registry.layer_at(i);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut updates = Vec::with_capacity(n);
        for (s, &cell) in cells.iter().enumerate() {
            let raw = cell_slice(t, cell);
            let g: Vec<T> = (0..c).map(|ch| grad[(offset + ch) * n + s]).collect();
            updates.push((cell, l2_normalize_backward(&raw, epsilon, &g)?));
        }
        let dst = registry.layer_at_mut(i).grad_mut();
        for (cell, g) in updates {
            for (ch, gv) in g.into_iter().enumerate() {
                dst[(ch * h + cell.0) * w + cell.1] += gv;
            }
        }
        offset += c;
    }
    Ok(())
}
