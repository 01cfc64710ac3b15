//! Momentum SGD with per-layer rates, the training loop, the bundled
//! feature net + head model and its checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::head::{HeadConfig, HeadVariant, SegHead};
use crate::hypercolumn::{gather_batch, scatter_batch_grad, FeatureNet, FeatureNetConfig};
use crate::sampler::{draw_samples, inference_samples, scatter_predictions};
use crate::spc::{aggregate, snapshot_gradients, GradientSnapshot, LearningRatePolicy};
use crate::superpixel::{slic, SlicParams, SuperpixelMap};
use crate::tensor::{softmax, softmax_xent_batch, ConvLayer, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// First epoch (0-based) trained at a tenth of the base rate.
    pub lr_drop_epoch: usize,
    pub total_epochs: usize,
    /// Images whose gradients are averaged into one step.
    pub batch_images: usize,
    pub seed: u64,
    /// First epoch whose gradients are snapshotted; defaults to 12/16 of
    /// the way to the rate drop.
    pub monitor_start_epoch: Option<usize>,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epoch: 24,
            total_epochs: 30,
            batch_images: 1,
            seed: 0,
            monitor_start_epoch: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            base_lr: 1e-6,
            lr_drop_epoch: 16,
            total_epochs: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.base_lr > 0.0) {
            return Err(invalid!("need weight_decay ≥ 0 and base_lr > 0"));
        }
        if self.batch_images == 0 {
            return Err(invalid!("batch_images must be positive"));
        }
        Ok(())
    }

    pub fn monitor_start(&self) -> usize {
        self.monitor_start_epoch
            .unwrap_or_else(|| (self.lr_drop_epoch as f64 * 12.0 / 16.0).round() as usize)
    }

    pub fn schedule_factor(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            0.1
        } else {
            1.0
        }
    }

    pub fn effective_lr(&self, multiplier: f64, epoch: usize) -> f64 {
        self.base_lr * multiplier * self.schedule_factor(epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Pixels drawn per training image.
    pub budget: usize,
    /// SLIC target region count.
    pub superpixels: usize,
    pub compactness: f64,
    pub slic_iters: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            budget: 48,
            superpixels: 64,
            compactness: 10.0,
            slic_iters: 10,
        }
    }
}

impl SamplingConfig {
    pub fn slic_params(&self) -> SlicParams {
        SlicParams {
            target_regions: self.superpixels,
            compactness: self.compactness,
            max_iters: self.slic_iters,
        }
    }

    pub fn superpixels_of(&self, image: &Tensor<f64>) -> Result<SuperpixelMap> {
        slic(image, &self.slic_params())
    }
}

/// splitmix64 over a sequence of words: independent seeds per (run, epoch, item).
pub fn derive_seed(words: &[u64]) -> u64 {
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        z = z.wrapping_add(w).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Feature net and head, fixed to one input size.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub net: FeatureNet<T>,
    pub head: SegHead<T>,
    input: (usize, usize),
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPSEGCK1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: FeatureNetConfig,
    head: HeadConfig,
    input: (usize, usize),
    params: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        net_config: FeatureNetConfig,
        variant: HeadVariant,
        width_factor: f64,
        n_classes: usize,
        input: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let in_dim = net_config.plan(input.0, input.1)?.hypercolumn_len();
        let head = HeadConfig::new(variant, in_dim, n_classes, width_factor);
        Model::from_configs(net_config, head, input, seed)
    }

    pub fn from_configs(
        net_config: FeatureNetConfig,
        head_config: HeadConfig,
        input: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let in_dim = net_config.plan(input.0, input.1)?.hypercolumn_len();
        if head_config.in_dim != in_dim {
            return Err(shape_err!(
                "head expects {} inputs but the feature net yields {in_dim}",
                head_config.in_dim
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = FeatureNet::new(net_config, &mut rng)?;
        net.prepare(input.0, input.1)?;
        let head = SegHead::new(head_config, &mut rng)?;
        Ok(Model { net, head, input })
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input
    }

    /// Feature-net layers followed by head layers.
    pub fn layers(&self) -> Vec<&ConvLayer<T>> {
        let mut v = self.net.conv_layers();
        v.extend(self.head.conv_layers());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut v = self.net.conv_layers_mut();
        v.extend(self.head.conv_layers_mut());
        v
    }

    pub fn head_layer_ids(&self) -> Vec<String> {
        self.head.config().layer_ids()
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
        self.head.zero_grad();
    }

    fn epsilon(&self) -> T {
        T::lit(self.net.config().l2_epsilon)
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let (_, h, w) = image.dims3()?;
        if (h, w) != self.input {
            return Err(shape_err!(
                "model built for {:?} inputs, got {h}×{w}",
                self.input
            ));
        }
        Ok(())
    }

    /// Logits (K×n×1) for the given pixels in inference mode.
    pub fn sample_logits(&self, image: &Tensor<T>, pixels: &[(usize, usize)]) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let reg = self.net.forward_prepared::<ChaCha8Rng>(image, None)?;
        let x = gather_batch(&reg, pixels, self.epsilon())?;
        Ok(self.head.forward(&x)?.logits().clone())
    }

    /// Dense labels: one pixel per superpixel is classified and its class
    /// probabilities are spread over the superpixel.
    pub fn predict(&self, image: &Tensor<T>, map: &SuperpixelMap, seed: u64) -> Result<Vec<usize>> {
        let samples = inference_samples(map, seed);
        let pixels: Vec<(usize, usize)> = samples.iter().map(|&(r, c, _)| (r, c)).collect();
        let logits = self.sample_logits(image, &pixels)?;
        let (k, n, _) = logits.dims3()?;
        let per_sample: Vec<(usize, Vec<T>)> = samples
            .iter()
            .enumerate()
            .map(|(s, &(_, _, region))| {
                let column: Vec<T> = (0..k).map(|c| logits.values()[c * n + s]).collect();
                (region, softmax(&column))
            })
            .collect();
        scatter_predictions(map, &per_sample)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let layers = self.layers();
        let mut params = Vec::new();
        for l in &layers {
            params.push((format!("{}.weight", l.layer_id), l.kernel.shape().to_vec()));
            params.push((format!("{}.bias", l.layer_id), l.bias.shape().to_vec()));
        }
        let mut net = self.net.config().clone();
        net.pyramid_windows = Some(net.plan(self.input.0, self.input.1)?.windows);
        let header = serde_json::to_vec(&CheckpointHeader {
            net,
            head: self.head.config().clone(),
            input: self.input,
            params,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for l in &layers {
            for v in l.kernel.values().iter().chain(l.bias.values()) {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut model = Model::from_configs(header.net, header.head, header.input, 0)?;
        let mut values = bytes[16 + hlen..]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
        let expected: usize = header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if bytes.len() - 16 - hlen != expected * 8 {
            return Err(bad("parameter data does not match the header"));
        }
        let mut specs = header.params.iter();
        for l in model.layers_mut() {
            for t in [&mut l.kernel, &mut l.bias] {
                let (name, shape) = specs.next().ok_or_else(|| bad("too few parameter records"))?;
                if shape.as_slice() != t.shape() {
                    return Err(bad(&format!(
                        "`{name}` has shape {shape:?}, model expects {:?}",
                        t.shape()
                    )));
                }
                t.values_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
            }
        }
        if specs.next().is_some() {
            return Err(bad("extra parameter records"));
        }
        Ok(model)
    }
}

/// v ← m·v + g + wd·p; p ← p − lr·v.
pub fn sgd_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(shape_err!(
            "sgd on {} params with {} grads and {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers keyed by layer id.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: BTreeMap<String, [Vec<T>; 2]>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Sgd {
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every layer with its own rate; layers without gradients are skipped.
    pub fn step(
        &mut self,
        layers: Vec<&mut ConvLayer<T>>,
        policy: &LearningRatePolicy,
        config: &TrainConfig,
        epoch: usize,
    ) -> Result<()> {
        let (m, wd) = (T::lit(config.momentum), T::lit(config.weight_decay));
        for layer in layers {
            let lr = T::lit(config.effective_lr(policy.multiplier(&layer.layer_id), epoch));
            let vel = self.velocity.entry(layer.layer_id.clone()).or_insert_with(|| {
                [
                    vec![T::zero(); layer.kernel.len()],
                    vec![T::zero(); layer.bias.len()],
                ]
            });
            for (t, v) in [&mut layer.kernel, &mut layer.bias].into_iter().zip(vel.iter_mut()) {
                let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
                sgd_update(t.values_mut(), &g, v, lr, m, wd)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Loss of every image, in visiting order.
    pub losses: Vec<f64>,
    /// confusion[truth][predicted] over the training samples.
    pub confusion: Vec<Vec<u64>>,
    /// Per-layer snapshots averaged over the epoch (monitored epochs only).
    pub snapshots: Vec<GradientSnapshot>,
    /// Every per-iteration snapshot behind `snapshots`, grouped by layer.
    pub iteration_snapshots: Vec<GradientSnapshot>,
    /// Iteration index after the epoch's last image.
    pub iteration: usize,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub sampling: SamplingConfig,
    pub policy: LearningRatePolicy,
    sgd: Sgd<T>,
    superpixels: Vec<Option<SuperpixelMap>>,
    iteration: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: Model<T>,
        config: TrainConfig,
        sampling: SamplingConfig,
        policy: LearningRatePolicy,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            sampling,
            policy,
            sgd: Sgd::new(),
            superpixels: Vec::new(),
            iteration: 0,
        })
    }

    /// SLIC maps of a dataset's items, computed once. The trainer assumes it
    /// always sees the same dataset.
    fn superpixels(&mut self, dataset: &Dataset, i: usize) -> Result<&SuperpixelMap> {
        if self.superpixels.len() != dataset.len() {
            self.superpixels = vec![None; dataset.len()];
        }
        if self.superpixels[i].is_none() {
            self.superpixels[i] = Some(self.sampling.superpixels_of(&dataset.items()[i].image)?);
        }
        Ok(self.superpixels[i].as_ref().expect("filled"))
    }

    pub fn train_epoch(&mut self, dataset: &Dataset, epoch: usize) -> Result<EpochReport> {
        if dataset.class_count() != self.model.head.config().n_classes {
            return Err(Error::Dataset(format!(
                "dataset has {} classes, head predicts {}",
                dataset.class_count(),
                self.model.head.config().n_classes
            )));
        }
        let monitor = epoch >= self.config.monitor_start();
        let head_ids = self.model.head_layer_ids();
        let k = dataset.class_count();
        let eps = T::lit(self.model.net.config().l2_epsilon);
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, 0])));
        let mut losses = Vec::with_capacity(order.len());
        let mut confusion = vec![vec![0u64; k]; k];
        let mut per_layer: BTreeMap<String, Vec<GradientSnapshot>> = BTreeMap::new();
        let scale = T::one() / T::lit(self.config.batch_images as f64);
        self.model.zero_grad();
        for (step, &i) in order.iter().enumerate() {
            let item = &dataset.items()[i];
            if item.shape() != self.model.input_shape() {
                return Err(Error::Dataset(format!(
                    "item `{}` is {:?}, model expects {:?}",
                    item.name,
                    item.shape(),
                    self.model.input_shape()
                )));
            }
            let item_seed = derive_seed(&[seed, epoch as u64, 1 + i as u64]);
            let samples = {
                let budget = self.sampling.budget;
                let map = self.superpixels(dataset, i)?;
                draw_samples(map, &item.labels, budget, dataset.ignore_label(), item_seed)?
            };
            let pixels = samples.pixels();
            let labels = samples.labels();
            let image = item.image_as::<T>();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[item_seed, 1]));
            let mut reg = self.model.net.forward_prepared(&image, Some(&mut drop_rng))?;
            let x = gather_batch(&reg, &pixels, eps)?;
            let mut trace = self.model.head.forward(&x)?;
            let (loss, mut g) = softmax_xent_batch(trace.logits(), &labels)?;
            let logits = trace.logits();
            let n = labels.len();
            for (s, &truth) in labels.iter().enumerate() {
                let mut best = 0;
                for c in 1..k {
                    if logits.values()[c * n + s] > logits.values()[best * n + s] {
                        best = c;
                    }
                }
                confusion[truth][best] += 1;
            }
            g.iter_mut().for_each(|v| *v *= scale);
            self.model.head.backward(&mut trace, &g)?;
            let dx = trace.input_grad().expect("filled by backward").to_vec();
            scatter_batch_grad(&mut reg, &pixels, eps, &dx)?;
            self.model.net.backward(&mut reg)?;
            if monitor {
                for s in snapshot_gradients(&trace, &head_ids, epoch, self.iteration)? {
                    per_layer.entry(s.layer_id.clone()).or_default().push(s);
                }
            }
            losses.push(loss.as_f64());
            self.iteration += 1;
            if (step + 1) % self.config.batch_images == 0 || step + 1 == order.len() {
                let (model, sgd) = (&mut self.model, &mut self.sgd);
                sgd.step(model.layers_mut(), &self.policy, &self.config, epoch)?;
                model.zero_grad();
            }
        }
        let snapshots = head_ids
            .iter()
            .filter_map(|id| per_layer.get(id))
            .map(|v| aggregate(v))
            .collect::<Result<Vec<_>>>()?;
        let iteration_snapshots = per_layer.into_values().flatten().collect();
        Ok(EpochReport {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            losses,
            confusion,
            snapshots,
            iteration_snapshots,
            iteration: self.iteration,
        })
    }

    /// Runs all configured epochs, handing each report to `on_epoch`.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::with_capacity(self.config.total_epochs);
        for epoch in 0..self.config.total_epochs {
            let r = self.train_epoch(dataset, epoch)?;
            on_epoch(&r)?;
            reports.push(r);
        }
        Ok(reports)
    }
}
