//! Classification heads applied to sampled hypercolumns. Hypercolumn batches
//! are D×n×1 tensors, so every layer is a 1×1 convolution over samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, eltwise_sum, relu, relu_backward, ConvLayer,
    Tensor,
};
use crate::Scalar;

/// Residual block widths (branch a, b, c) at full size.
pub const RESBLOCK_WIDTHS: [[usize; 3]; 3] = [[1024, 1024, 2048], [512, 512, 2048], [1024, 1024, 2048]];
pub const FC_WIDTHS: [usize; 2] = [4096, 4096];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Resblock,
    Fc,
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resblock" => Ok(HeadVariant::Resblock),
            "fc" => Ok(HeadVariant::Fc),
            other => Err(invalid!("unknown head variant `{other}` (expected resblock or fc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub in_dim: usize,
    pub n_classes: usize,
    /// Multiplies every full-size width (1.0 = full size).
    pub width_factor: f64,
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, in_dim: usize, n_classes: usize, width_factor: f64) -> Self {
        HeadConfig {
            variant,
            in_dim,
            n_classes,
            width_factor,
        }
    }

    fn scale(&self, w: usize) -> usize {
        ((w as f64 * self.width_factor).round() as usize).max(1)
    }

    pub fn block_widths(&self) -> [[usize; 3]; 3] {
        RESBLOCK_WIDTHS.map(|b| b.map(|w| self.scale(w)))
    }

    pub fn fc_widths(&self) -> [usize; 2] {
        FC_WIDTHS.map(|w| self.scale(w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.n_classes == 0 {
            return Err(invalid!("head input width and class count must be positive"));
        }
        if !(self.width_factor > 0.0) {
            return Err(invalid!("width factor must be positive"));
        }
        Ok(())
    }

    /// Layer ids in forward order.
    pub fn layer_ids(&self) -> Vec<String> {
        match self.variant {
            HeadVariant::Fc => vec!["fc6".into(), "fc7".into(), "score".into()],
            HeadVariant::Resblock => {
                let mut ids = Vec::new();
                for b in 1..=3 {
                    for part in ["a", "b", "c"] {
                        ids.push(format!("res{b}_{part}"));
                    }
                    if b == 1 {
                        ids.push("res1_proj".into());
                    }
                }
                ids.push("score".into());
                ids
            }
        }
    }

    /// (id, in, out) of every 1×1 layer, in forward order.
    pub fn layer_dims(&self) -> Vec<(String, usize, usize)> {
        let ids = self.layer_ids();
        let mut dims = Vec::new();
        match self.variant {
            HeadVariant::Fc => {
                let [w6, w7] = self.fc_widths();
                dims.push((self.in_dim, w6));
                dims.push((w6, w7));
                dims.push((w7, self.n_classes));
            }
            HeadVariant::Resblock => {
                let mut x = self.in_dim;
                for (b, [wa, wb, wc]) in self.block_widths().into_iter().enumerate() {
                    dims.push((x, wa));
                    dims.push((wa, wb));
                    dims.push((wb, wc));
                    if b == 0 {
                        dims.push((x, wc));
                    }
                    x = wc;
                }
                dims.push((x, self.n_classes));
            }
        }
        ids.into_iter().zip(dims).map(|(id, (i, o))| (id, i, o)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(_, i, o)| i * o + o).sum()
    }

    /// Multiply-accumulates to classify one sample.
    pub fn macs_per_sample(&self) -> u64 {
        self.layer_dims().iter().map(|(_, i, o)| (i * o) as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHead<T> {
    config: HeadConfig,
    layers: Vec<ConvLayer<T>>,
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    input: Tensor<T>,
    a: Tensor<T>,
    ra: Tensor<T>,
    b: Tensor<T>,
    rb: Tensor<T>,
    c: Tensor<T>,
    proj: Option<Tensor<T>>,
    sum: Tensor<T>,
}

/// Intermediate tensors of one head forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    input: Tensor<T>,
    blocks: Vec<BlockTrace<T>>,
    fc: Vec<(Tensor<T>, Tensor<T>)>,
    classifier_input: Tensor<T>,
    logits: Tensor<T>,
}

impl<T: Scalar> HeadTrace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    /// Pre-activation output of a layer; its `grad` is populated by backward.
    pub fn layer_output(&self, layer_id: &str) -> Option<&Tensor<T>> {
        if layer_id == "score" {
            return Some(&self.logits);
        }
        if let Some(rest) = layer_id.strip_prefix("fc") {
            return match rest {
                "6" => self.fc.first().map(|f| &f.0),
                "7" => self.fc.get(1).map(|f| &f.0),
                _ => None,
            };
        }
        let rest = layer_id.strip_prefix("res")?;
        let (b, part) = rest.split_once('_')?;
        let block = self.blocks.get(b.parse::<usize>().ok()?.checked_sub(1)?)?;
        match part {
            "a" => Some(&block.a),
            "b" => Some(&block.b),
            "c" => Some(&block.c),
            "proj" => block.proj.as_ref(),
            _ => None,
        }
    }

    /// Gradient with respect to the head input, after backward.
    pub fn input_grad(&self) -> Option<&[T]> {
        self.input.grad()
    }
}

impl<T: Scalar> SegHead<T> {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for (id, i, o) in config.layer_dims() {
            let mut l = ConvLayer::new(id, o, i, (1, 1), 1, 0)?;
            l.init_xavier(rng);
            layers.push(l);
        }
        Ok(SegHead { config, layers })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer<T>> {
        self.layers.iter().collect()
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        self.layers.iter_mut().collect()
    }

    pub fn layer(&self, id: &str) -> Option<&ConvLayer<T>> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut ConvLayer<T>> {
        self.layers.iter_mut().find(|l| l.layer_id == id)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(ConvLayer::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Classifies a D×n×1 batch of hypercolumns.
    pub fn forward(&self, input: &Tensor<T>) -> Result<HeadTrace<T>> {
        let (d, _, w) = input.dims3()?;
        if d != self.config.in_dim || w != 1 {
            return Err(shape_err!(
                "head expects a {}×n×1 batch, got {:?}",
                self.config.in_dim,
                input.shape()
            ));
        }
        let mut blocks = Vec::new();
        let mut fc = Vec::new();
        let mut x = input.clone();
        match self.config.variant {
            HeadVariant::Fc => {
                for l in &self.layers[..2] {
                    let pre = conv2d(&x, l)?;
                    let post = relu(&pre);
                    x = post.clone();
                    fc.push((pre, post));
                }
            }
            HeadVariant::Resblock => {
                let mut li = 0;
                for b in 0..3 {
                    let a = conv2d(&x, &self.layers[li])?;
                    let ra = relu(&a);
                    let bb = conv2d(&ra, &self.layers[li + 1])?;
                    let rb = relu(&bb);
                    let c = conv2d(&rb, &self.layers[li + 2])?;
                    li += 3;
                    let proj = if b == 0 {
                        li += 1;
                        Some(conv2d(&x, &self.layers[li - 1])?)
                    } else {
                        None
                    };
                    let sum = eltwise_sum(&c, proj.as_ref().unwrap_or(&x))?;
                    let out = relu(&sum);
                    blocks.push(BlockTrace {
                        input: x,
                        a,
                        ra,
                        b: bb,
                        rb,
                        c,
                        proj,
                        sum,
                    });
                    x = out;
                }
            }
        }
        let logits = conv2d(&x, self.layers.last().expect("classifier"))?;
        Ok(HeadTrace {
            input: input.clone(),
            blocks,
            fc,
            classifier_input: x,
            logits,
        })
    }

    /// Logits for a single hypercolumn vector.
    pub fn forward_one(&self, hypercolumn: &[T]) -> Result<Vec<T>> {
        let input = Tensor::from_vec(&[hypercolumn.len(), 1, 1], hypercolumn.to_vec())?;
        Ok(self.forward(&input)?.logits.into_values())
    }

    /// Accumulates parameter gradients and fills `trace` gradients (layer
    /// outputs and input) from the gradient of the logits.
    pub fn backward(&mut self, trace: &mut HeadTrace<T>, grad_logits: &[T]) -> Result<()> {
        let n_layers = self.layers.len();
        trace.logits.accumulate_grad(grad_logits)?;
        conv2d_backward(
            &mut trace.classifier_input,
            &mut self.layers[n_layers - 1],
            grad_logits,
        )?;
        let mut g = trace
            .classifier_input
            .grad()
            .expect("filled by backward")
            .to_vec();
        match self.config.variant {
            HeadVariant::Fc => {
                for i in (0..trace.fc.len()).rev() {
                    let (lo, hi) = trace.fc.split_at_mut(i);
                    let pre = &mut hi[0].0;
                    relu_backward(pre, &g)?;
                    let gp = pre.grad().expect("filled").to_vec();
                    let below = match lo.last_mut() {
                        Some(prev) => &mut prev.1,
                        None => &mut trace.input,
                    };
                    below.clear_grad();
                    conv2d_backward(below, &mut self.layers[i], &gp)?;
                    g = below.grad().expect("filled").to_vec();
                }
            }
            HeadVariant::Resblock => {
                let starts = [0usize, 4, 7];
                for b in (0..3).rev() {
                    let li = starts[b];
                    let block = &mut trace.blocks[b];
                    // g is the gradient of relu(sum)
                    relu_backward(&mut block.sum, &g)?;
                    let gs = block.sum.grad().expect("filled").to_vec();
                    block.c.accumulate_grad(&gs)?;
                    conv2d_backward(&mut block.rb, &mut self.layers[li + 2], &gs)?;
                    let grb = block.rb.grad().expect("filled").to_vec();
                    relu_backward(&mut block.b, &grb)?;
                    let gb = block.b.grad().expect("filled").to_vec();
                    conv2d_backward(&mut block.ra, &mut self.layers[li + 1], &gb)?;
                    let gra = block.ra.grad().expect("filled").to_vec();
                    relu_backward(&mut block.a, &gra)?;
                    let ga = block.a.grad().expect("filled").to_vec();
                    block.input.clear_grad();
                    conv2d_backward(&mut block.input, &mut self.layers[li], &ga)?;
                    match block.proj.as_mut() {
                        Some(proj) => {
                            proj.accumulate_grad(&gs)?;
                            conv2d_backward(&mut block.input, &mut self.layers[li + 3], &gs)?;
                        }
                        None => block.input.accumulate_grad(&gs)?,
                    }
                    g = block.input.grad().expect("filled").to_vec();
                }
                trace.input.clear_grad();
                trace.input.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}
