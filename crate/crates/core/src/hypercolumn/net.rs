use rand::Rng;
use serde::Serialize;

use super::plan::{branch_kernel, FeatureNetConfig};
use super::HYPERCOLUMN_LAYERS;
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, dropout, dropout_backward, maxpool, maxpool_backward, relu,
    relu_backward, zero_pad, zero_pad_backward, ArgmaxMap, ConvLayer, DropoutMask, Tensor,
};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
enum Stage<T> {
    Conv(ConvLayer<T>),
    Relu,
    Pool,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch<T> {
    window: Option<usize>,
    conv: ConvLayer<T>,
}

/// Backbone (five conv stages, stride 16) followed by four parallel
/// pool + conv branches on the conv5 output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet<T> {
    config: FeatureNetConfig,
    backbone: Vec<Stage<T>>,
    /// Index into the backbone activations of conv3, conv4 and conv5.
    taps: [usize; 3],
    branches: Vec<Branch<T>>,
}

impl<T: Scalar> FeatureNet<T> {
    /// Builds the network with Glorot-initialized weights.
    pub fn new<R: Rng + ?Sized>(config: FeatureNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::new();
        let mut taps = [0; 3];
        let mut in_ch = config.in_channels;
        for stage in 0..5 {
            let out_ch = config.stage_channels[stage];
            for k in 0..config.convs_per_stage[stage] {
                let mut conv = ConvLayer::new(
                    format!("conv{}_{}", stage + 1, k + 1),
                    out_ch,
                    in_ch,
                    (3, 3),
                    1,
                    1,
                )?;
                conv.init_xavier(rng);
                backbone.push(Stage::Conv(conv));
                backbone.push(Stage::Relu);
                in_ch = out_ch;
            }
            if stage >= 2 {
                // activation index after the last ReLU of this stage
                taps[stage - 2] = backbone.len();
            }
            if stage < 4 {
                backbone.push(Stage::Pool);
            }
        }
        let mut branches = Vec::with_capacity(4);
        for b in 0..4 {
            // Kernel extent depends on the pooled map, fixed on first forward.
            let mut conv = ConvLayer::new(
                HYPERCOLUMN_LAYERS[3 + b],
                config.branch_channels,
                in_ch,
                (3, 3),
                3,
                0,
            )?;
            conv.init_xavier(rng);
            branches.push(Branch { window: None, conv });
        }
        if let Some(ws) = config.pyramid_windows {
            for (b, w) in branches.iter_mut().zip(ws) {
                b.window = Some(w);
            }
        }
        Ok(FeatureNet {
            config,
            backbone,
            taps,
            branches,
        })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    /// Fixes the pyramid windows and branch kernels for an input size.
    /// Branch kernels shrink (keeping their leading weights) when the
    /// pooled map is smaller than 3×3.
    pub fn prepare(&mut self, h: usize, w: usize) -> Result<()> {
        let plan = self.config.plan(h, w)?;
        for (b, branch) in self.branches.iter_mut().enumerate() {
            let window = plan.windows[b];
            if let Some(existing) = branch.window {
                if existing != window {
                    return Err(shape_err!(
                        "network was prepared for pyramid window {existing} on branch {}, input {h}×{w} needs {window}",
                        b + 1
                    ));
                }
            }
            branch.window = Some(window);
            let (ph, pw) = plan.pooled[b];
            let k = branch_kernel(ph, pw);
            if branch.conv.kernel_hw() != (k, k) {
                let (oc, ic) = (branch.conv.out_channels(), branch.conv.in_channels());
                let (kh, kw) = branch.conv.kernel_hw();
                let old = branch.conv.kernel.values().to_vec();
                let mut kernel = vec![T::zero(); oc * ic * k * k];
                for o in 0..oc {
                    for i in 0..ic {
                        for y in 0..k.min(kh) {
                            for x in 0..k.min(kw) {
                                kernel[((o * ic + i) * k + y) * k + x] =
                                    old[((o * ic + i) * kh + y) * kw + x];
                            }
                        }
                    }
                }
                branch.conv.kernel = Tensor::from_vec(&[oc, ic, k, k], kernel)?;
                branch.conv.stride = k;
            }
        }
        Ok(())
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer<T>> {
        let mut out: Vec<&ConvLayer<T>> = self
            .backbone
            .iter()
            .filter_map(|s| match s {
                Stage::Conv(c) => Some(c),
                _ => None,
            })
            .collect();
        out.extend(self.branches.iter().map(|b| &b.conv));
        out
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut out: Vec<&mut ConvLayer<T>> = self
            .backbone
            .iter_mut()
            .filter_map(|s| match s {
                Stage::Conv(c) => Some(c),
                _ => None,
            })
            .collect();
        out.extend(self.branches.iter_mut().map(|b| &mut b.conv));
        out
    }

    pub fn zero_grad(&mut self) {
        self.conv_layers_mut().into_iter().for_each(|c| c.zero_grad());
    }

    /// Runs the network. Pass an RNG to apply training-time dropout to the
    /// pyramid outputs; `None` runs in inference mode.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        image: &Tensor<T>,
        dropout_rng: Option<&mut R>,
    ) -> Result<Registry<T>> {
        let (c, h, w) = image.dims3()?;
        if c != self.config.in_channels {
            return Err(shape_err!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        self.prepare(h, w)?;
        self.forward_prepared(image, dropout_rng)
    }

    /// Forward pass for a network already prepared for this input size.
    pub fn forward_prepared<R: Rng + ?Sized>(
        &self,
        image: &Tensor<T>,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Registry<T>> {
        let (_, h, w) = image.dims3()?;
        let plan = self.config.plan(h, w)?;
        let mut acts = Vec::with_capacity(self.backbone.len() + 1);
        let mut argmax = Vec::with_capacity(self.backbone.len());
        acts.push(image.clone());
        for stage in &self.backbone {
            let x = acts.last().expect("input pushed");
            let (y, am) = match stage {
                Stage::Conv(conv) => (conv2d(x, conv)?, None),
                Stage::Relu => (relu(x), None),
                Stage::Pool => {
                    let (y, am) = maxpool(x, 2, 2)?;
                    (y, Some(am))
                }
            };
            acts.push(y);
            argmax.push(am);
        }
        let conv5 = &acts[self.taps[2]];
        let mut branches = Vec::with_capacity(4);
        for branch in &self.branches {
            let window = branch
                .window
                .ok_or_else(|| invalid!("network not prepared for input {h}×{w}"))?;
            let (pooled, pool_argmax) = maxpool(conv5, window, window)?;
            let (_, ph, pw) = pooled.dims3()?;
            let k = branch.conv.stride;
            let pad = (ph.div_ceil(k) * k - ph, pw.div_ceil(k) * k - pw);
            let padded = zero_pad(&pooled, pad.0, pad.1)?;
            let pre = conv2d(&padded, &branch.conv)?;
            let post = relu(&pre);
            let (out, mask) = match dropout_rng.as_deref_mut() {
                Some(rng) if self.config.pyramid_keep_prob < 1.0 => {
                    let (o, m) = dropout(&post, self.config.pyramid_keep_prob, rng)?;
                    (o, Some(m))
                }
                _ => (post.clone(), None),
            };
            branches.push(BranchTrace {
                argmax: pool_argmax,
                pooled,
                pad,
                padded,
                pre,
                post,
                out,
                mask,
            });
        }
        let layers = plan
            .layers
            .iter()
            .map(|l| LayerInfo {
                id: l.id.clone(),
                stride: l.stride,
                height: l.height,
                width: l.width,
                channels: l.channels,
            })
            .collect();
        Ok(Registry {
            input: (h, w),
            acts,
            argmax,
            taps: self.taps,
            branches,
            layers,
        })
    }

    /// Backpropagates the gradients accumulated in the registry's layer
    /// tensors into every convolution's parameters.
    pub fn backward(&mut self, registry: &mut Registry<T>) -> Result<()> {
        let conv5_idx = registry.taps[2];
        for (branch, trace) in self.branches.iter_mut().zip(registry.branches.iter_mut()) {
            let Some(g) = trace.out.grad().map(<[T]>::to_vec) else {
                continue;
            };
            match &trace.mask {
                Some(mask) => dropout_backward(&mut trace.post, mask, &g)?,
                None => trace.post.accumulate_grad(&g)?,
            }
            let g = grad_of(&trace.post)?;
            relu_backward(&mut trace.pre, &g)?;
            let g = grad_of(&trace.pre)?;
            conv2d_backward(&mut trace.padded, &mut branch.conv, &g)?;
            let g = grad_of(&trace.padded)?;
            zero_pad_backward(&mut trace.pooled, trace.pad.0, trace.pad.1, &g)?;
            let g = grad_of(&trace.pooled)?;
            maxpool_backward(&mut registry.acts[conv5_idx], &trace.argmax, &g)?;
        }
        for (i, stage) in self.backbone.iter_mut().enumerate().rev() {
            let (lo, hi) = registry.acts.split_at_mut(i + 1);
            let Some(g) = hi[0].grad() else { continue };
            let input = &mut lo[i];
            match stage {
                Stage::Conv(conv) => {
                    if i == 0 {
                        // The image needs no gradient; the kernel still does.
                        let mut scratch = input.clone();
                        conv2d_backward(&mut scratch, conv, g)?;
                    } else {
                        conv2d_backward(input, conv, g)?;
                    }
                }
                Stage::Relu => relu_backward(input, g)?,
                Stage::Pool => {
                    let am = registry.argmax[i].as_ref().expect("pool stage records argmax");
                    maxpool_backward(input, am, g)?;
                }
            }
        }
        Ok(())
    }
}

fn grad_of<T: Scalar>(t: &Tensor<T>) -> Result<Vec<T>> {
    t.grad()
        .map(<[T]>::to_vec)
        .ok_or_else(|| Error::MissingGradient("intermediate".into()))
}

#[derive(Debug, Clone)]
struct BranchTrace<T> {
    argmax: ArgmaxMap,
    pooled: Tensor<T>,
    pad: (usize, usize),
    padded: Tensor<T>,
    pre: Tensor<T>,
    post: Tensor<T>,
    out: Tensor<T>,
    mask: Option<DropoutMask<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub id: String,
    /// Input pixels per cell along each axis.
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Everything one forward pass produced: the hypercolumn layers by id, plus
/// the intermediate activations backward needs.
#[derive(Debug, Clone)]
pub struct Registry<T> {
    input: (usize, usize),
    acts: Vec<Tensor<T>>,
    argmax: Vec<Option<ArgmaxMap>>,
    taps: [usize; 3],
    branches: Vec<BranchTrace<T>>,
    layers: Vec<LayerInfo>,
}

impl<T: Scalar> Registry<T> {
    pub fn input_shape(&self) -> (usize, usize) {
        self.input
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    fn index_of(&self, layer_id: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id == layer_id)
            .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))
    }

    pub fn info(&self, layer_id: &str) -> Result<&LayerInfo> {
        Ok(&self.layers[self.index_of(layer_id)?])
    }

    pub fn layer(&self, layer_id: &str) -> Result<&Tensor<T>> {
        let i = self.index_of(layer_id)?;
        Ok(self.layer_at(i))
    }

    pub(crate) fn layer_at(&self, i: usize) -> &Tensor<T> {
        if i < 3 {
            &self.acts[self.taps[i]]
        } else {
            &self.branches[i - 3].out
        }
    }

    pub fn layer_mut(&mut self, layer_id: &str) -> Result<&mut Tensor<T>> {
        let i = self.index_of(layer_id)?;
        Ok(self.layer_at_mut(i))
    }

    pub(crate) fn layer_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        if i < 3 {
            &mut self.acts[self.taps[i]]
        } else {
            &mut self.branches[i - 3].out
        }
    }

    /// Pooled map (before the branch convolution) of pyramid branch `b`.
    pub fn pooled(&self, b: usize) -> Option<&Tensor<T>> {
        self.branches.get(b).map(|t| &t.pooled)
    }

    /// Feature-map cell of `layer_id` whose receptive field holds `pixel`.
    pub fn track_location(&self, pixel: (usize, usize), layer_id: &str) -> Result<(usize, usize)> {
        let info = self.info(layer_id)?;
        self.track_in(pixel, info)
    }

    pub(crate) fn track_in(&self, pixel: (usize, usize), info: &LayerInfo) -> Result<(usize, usize)> {
        let (row, col) = pixel;
        if row >= self.input.0 || col >= self.input.1 {
            return Err(invalid!(
                "pixel ({row}, {col}) outside the {}×{} input",
                self.input.0,
                self.input.1
            ));
        }
        Ok((
            (row / info.stride).min(info.height - 1),
            (col / info.stride).min(info.width - 1),
        ))
    }

    /// Clears every gradient held by the registry.
    pub fn zero_grad(&mut self) {
        self.acts.iter_mut().for_each(Tensor::clear_grad);
        for b in &mut self.branches {
            for t in [&mut b.pooled, &mut b.padded, &mut b.pre, &mut b.post, &mut b.out] {
                t.clear_grad();
            }
        }
    }

    /// Per-layer shapes and value/gradient norms, as pretty JSON.
    pub fn dump(&self) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            id: &'a str,
            shape: &'a [usize],
            stride: usize,
            norm: f64,
            grad_norm: Option<f64>,
        }
        let entries: Vec<Entry> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, info)| {
                let t = self.layer_at(i);
                Entry {
                    id: &info.id,
                    shape: t.shape(),
                    stride: info.stride,
                    norm: t.l2_norm().as_f64(),
                    grad_norm: t
                        .grad()
                        .map(|g| g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()),
                }
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("serializable")
    }
}
