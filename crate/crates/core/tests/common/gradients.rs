//! Central-difference gradient checks for every differentiable operation,
//! the feature network and both head variants.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spseg::head::{HeadConfig, HeadVariant, SegHead};
use spseg::hypercolumn::{gather_batch, scatter_batch_grad, FeatureNet, FeatureNetConfig, HYPERCOLUMN_LAYERS};
use spseg::tensor::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, dropout, dropout_backward,
    eltwise_sum, eltwise_sum_backward, l2_normalize_backward, l2_normalize_slice, maxpool,
    maxpool_backward, relu, relu_backward, softmax_xent_batch, zero_pad, zero_pad_backward, ConvLayer,
    Tensor,
};

pub const PROBES: usize = 50;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Relative errors are measured against at least this magnitude.
const FLOOR: f64 = 1e-8;
const EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.probes >= PROBES && self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// `loss(i, delta)` is the loss with parameter `i` shifted by `delta`.
pub fn probe(name: &'static str, analytic: &[f64], seed: u64, mut loss: impl FnMut(usize, f64) -> f64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let i = rng.gen_range(0..analytic.len());
        let numeric = (loss(i, STEP) - loss(i, -STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    FdReport {
        name,
        probes: PROBES,
        max_rel_err: worst,
    }
}

/// Probes a loss of several flat inputs, indexed as one concatenated vector.
fn probe_parts(
    name: &'static str,
    parts: &[Vec<f64>],
    analytic: &[Vec<f64>],
    seed: u64,
    loss: impl Fn(&[Vec<f64>]) -> f64,
) -> FdReport {
    let flat: Vec<f64> = analytic.concat();
    let locate = |mut i: usize| {
        for (p, part) in parts.iter().enumerate() {
            if i < part.len() {
                return (p, i);
            }
            i -= part.len();
        }
        unreachable!("probe index inside the parts")
    };
    probe(name, &flat, seed, |i, delta| {
        let (p, j) = locate(i);
        let mut shifted = parts.to_vec();
        shifted[p][j] += delta;
        loss(&shifted)
    })
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, values.to_vec()).unwrap()
}

fn weighted(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn conv_check(name: &'static str, in_shape: [usize; 3], oc: usize, k: usize, stride: usize, pad: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [ic, h, w] = in_shape;
    let x = uniform(&mut rng, ic * h * w);
    let kern = uniform(&mut rng, oc * ic * k * k);
    let bias = uniform(&mut rng, oc);
    let build = |kern: &[f64], bias: &[f64]| {
        let mut l = ConvLayer::new("c", oc, ic, (k, k), stride, pad).unwrap();
        l.kernel.values_mut().copy_from_slice(kern);
        l.bias.values_mut().copy_from_slice(bias);
        l
    };
    let out_len = conv2d(&tensor(&in_shape, &x), &build(&kern, &bias)).unwrap().len();
    let r = uniform(&mut rng, out_len);
    let mut input = tensor(&in_shape, &x);
    let mut layer = build(&kern, &bias);
    conv2d_backward(&mut input, &mut layer, &r).unwrap();
    let analytic = vec![
        input.grad().unwrap().to_vec(),
        layer.kernel.grad().unwrap().to_vec(),
        layer.bias.grad().unwrap().to_vec(),
    ];
    probe_parts(name, &[x, kern, bias], &analytic, seed, |p| {
        let y = conv2d(&tensor(&in_shape, &p[0]), &build(&p[1], &p[2])).unwrap();
        weighted(y.values(), &r)
    })
}

fn maxpool_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 8, 8];
    // Distinct values 0.01 apart, so no perturbation changes an argmax.
    let mut x: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
    x.shuffle(&mut rng);
    let (y, am) = maxpool(&tensor(&shape, &x), 3, 2).unwrap();
    let r = uniform(&mut rng, y.len());
    let mut input = tensor(&shape, &x);
    maxpool_backward(&mut input, &am, &r).unwrap();
    probe_parts("maxpool (clipped windows)", &[x], &[input.grad().unwrap().to_vec()], seed, |p| {
        weighted(maxpool(&tensor(&shape, &p[0]), 3, 2).unwrap().0.values(), &r)
    })
}

fn relu_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..80)
        .map(|_| rng.gen_range(0.05..1.0) * if rng.gen() { 1.0 } else { -1.0 })
        .collect();
    let r = uniform(&mut rng, 80);
    let mut input = tensor(&[80], &x);
    relu_backward(&mut input, &r).unwrap();
    probe_parts("relu", &[x], &[input.grad().unwrap().to_vec()], seed, |p| {
        weighted(relu(&tensor(&[80], &p[0])).values(), &r)
    })
}

fn eltwise_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 5, 6];
    let (a, b, r) = (uniform(&mut rng, 60), uniform(&mut rng, 60), uniform(&mut rng, 60));
    let (mut ta, mut tb) = (tensor(&shape, &a), tensor(&shape, &b));
    eltwise_sum_backward(&mut ta, &mut tb, &r).unwrap();
    let analytic = vec![ta.grad().unwrap().to_vec(), tb.grad().unwrap().to_vec()];
    probe_parts("eltwise sum", &[a, b], &analytic, seed, |p| {
        weighted(eltwise_sum(&tensor(&shape, &p[0]), &tensor(&shape, &p[1])).unwrap().values(), &r)
    })
}

fn concat_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [[1, 4, 5], [3, 4, 5], [2, 4, 5]];
    let parts: Vec<Vec<f64>> = shapes.iter().map(|s| uniform(&mut rng, s.iter().product())).collect();
    let r = uniform(&mut rng, 6 * 20);
    let mut ts: Vec<Tensor<f64>> = shapes.iter().zip(&parts).map(|(s, v)| tensor(s, v)).collect();
    let mut refs: Vec<&mut Tensor<f64>> = ts.iter_mut().collect();
    concat_channels_backward(&mut refs, &r).unwrap();
    let analytic: Vec<Vec<f64>> = ts.iter().map(|t| t.grad().unwrap().to_vec()).collect();
    probe_parts("concat channels", &parts, &analytic, seed, |p| {
        let ts: Vec<Tensor<f64>> = shapes.iter().zip(p).map(|(s, v)| tensor(s, v)).collect();
        let refs: Vec<&Tensor<f64>> = ts.iter().collect();
        weighted(concat_channels(&refs).unwrap().values(), &r)
    })
}

fn zero_pad_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [3, 4, 5];
    let x = uniform(&mut rng, 60);
    let r = uniform(&mut rng, 3 * 6 * 6);
    let mut input = tensor(&shape, &x);
    zero_pad_backward(&mut input, 2, 1, &r).unwrap();
    probe_parts("zero pad", &[x], &[input.grad().unwrap().to_vec()], seed, |p| {
        weighted(zero_pad(&tensor(&shape, &p[0]), 2, 1).unwrap().values(), &r)
    })
}

fn dropout_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, 90);
    let r = uniform(&mut rng, 90);
    let mask_seed = rng.gen();
    let run = |x: &[f64]| dropout(&tensor(&[90], x), 0.7, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    let (_, mask) = run(&x);
    let mut input = tensor(&[90], &x);
    dropout_backward(&mut input, &mask, &r).unwrap();
    probe_parts("dropout (fixed mask)", &[x], &[input.grad().unwrap().to_vec()], seed, |p| {
        weighted(run(&p[0]).0.values(), &r)
    })
}

fn l2norm_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, 64);
    let r = uniform(&mut rng, 64);
    let g = l2_normalize_backward(&x, EPS, &r).unwrap();
    probe_parts("l2 normalize", &[x], &[g], seed, |p| weighted(&l2_normalize_slice(&p[0], EPS), &r))
}

fn xent_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, n) = (5, 12);
    let z: Vec<f64> = uniform(&mut rng, k * n).into_iter().map(|v| 3.0 * v).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let (_, g) = softmax_xent_batch(&tensor(&[k, n, 1], &z), &labels).unwrap();
    probe_parts("softmax cross-entropy", &[z], &[g], seed, |p| {
        softmax_xent_batch(&tensor(&[k, n, 1], &p[0]), &labels).unwrap().0
    })
}

/// Narrow network that still has every stage and all four pyramid branches.
pub fn tiny_net_config() -> FeatureNetConfig {
    FeatureNetConfig {
        stage_channels: [4, 4, 8, 8, 8],
        convs_per_stage: [1; 5],
        branch_channels: 6,
        pyramid_keep_prob: 0.8,
        ..FeatureNetConfig::desk()
    }
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Tensor<f64> {
    Tensor::from_vec(&[3, side, side], (0..3 * side * side).map(|_| rng.gen()).collect()).unwrap()
}

fn random_pixels(rng: &mut ChaCha8Rng, side: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|_| (rng.gen_range(0..side), rng.gen_range(0..side))).collect()
}

fn gather_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = FeatureNet::<f64>::new(tiny_net_config(), &mut rng).unwrap();
    let mut reg = net.forward::<ChaCha8Rng>(&random_image(&mut rng, 64), None).unwrap();
    let pixels = random_pixels(&mut rng, 64, 7);
    let d: usize = reg.layers().iter().map(|l| l.channels).sum();
    let r = uniform(&mut rng, d * pixels.len());
    scatter_batch_grad(&mut reg, &pixels, EPS, &r).unwrap();
    let mut index = Vec::new();
    let mut analytic = Vec::new();
    for id in HYPERCOLUMN_LAYERS {
        let t = reg.layer(id).unwrap();
        for (j, &g) in t.grad().unwrap().iter().enumerate() {
            index.push((id, j));
            analytic.push(g);
        }
    }
    // Only the tracked cells carry gradient; probe those plus a few others.
    let mut probe_set: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i] != 0.0).collect();
    probe_set.extend((0..8).map(|_| rng.gen_range(0..analytic.len())));
    let sub: Vec<f64> = probe_set.iter().map(|&i| analytic[i]).collect();
    probe("hypercolumn gather", &sub, seed, |i, delta| {
        let (id, j) = index[probe_set[i]];
        let mut shifted = reg.clone();
        shifted.layer_mut(id).unwrap().values_mut()[j] += delta;
        weighted(gather_batch(&shifted, &pixels, EPS).unwrap().values(), &r)
    })
}

/// (layer, bias?, index) of every parameter of a list of conv layers.
fn param_index(layers: &[&ConvLayer<f64>]) -> (Vec<(usize, bool, usize)>, Vec<f64>) {
    let mut index = Vec::new();
    let mut grads = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        for (bias, t) in [(false, &layer.kernel), (true, &layer.bias)] {
            for (j, &g) in t.grad().expect("backward ran").iter().enumerate() {
                index.push((l, bias, j));
                grads.push(g);
            }
        }
    }
    (index, grads)
}

fn shift(layers: Vec<&mut ConvLayer<f64>>, (l, bias, j): (usize, bool, usize), delta: f64) {
    let layer = layers.into_iter().nth(l).unwrap();
    let t = if bias { &mut layer.bias } else { &mut layer.kernel };
    t.values_mut()[j] += delta;
}

fn feature_net_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = FeatureNet::<f64>::new(tiny_net_config(), &mut rng).unwrap();
    let image = random_image(&mut rng, 64);
    let pixels = random_pixels(&mut rng, 64, 6);
    let drop_seed: u64 = rng.gen();
    let d = net.config().plan(64, 64).unwrap().hypercolumn_len();
    let r = uniform(&mut rng, d * pixels.len());
    let loss = |net: &mut FeatureNet<f64>| {
        let reg = net.forward(&image, Some(&mut ChaCha8Rng::seed_from_u64(drop_seed))).unwrap();
        weighted(gather_batch(&reg, &pixels, EPS).unwrap().values(), &r)
    };
    let mut reg = net.forward(&image, Some(&mut ChaCha8Rng::seed_from_u64(drop_seed))).unwrap();
    net.zero_grad();
    scatter_batch_grad(&mut reg, &pixels, EPS, &r).unwrap();
    net.backward(&mut reg).unwrap();
    let (index, analytic) = param_index(&net.conv_layers());
    probe("feature network", &analytic, seed, |i, delta| {
        shift(net.conv_layers_mut(), index[i], delta);
        let v = loss(&mut net);
        shift(net.conv_layers_mut(), index[i], -delta);
        v
    })
}

fn head_check(name: &'static str, variant: HeadVariant, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k, n) = (24, 4, 9);
    let mut head = SegHead::<f64>::new(HeadConfig::new(variant, d, k, 1.0 / 128.0), &mut rng).unwrap();
    // Non-zero biases so no unit sits exactly on a ReLU kink.
    for layer in head.conv_layers_mut() {
        for b in layer.bias.values_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    let x = tensor(&[d, n, 1], &uniform(&mut rng, d * n));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let loss = |head: &SegHead<f64>, x: &Tensor<f64>| {
        softmax_xent_batch(head.forward(x).unwrap().logits(), &labels).unwrap().0
    };
    let mut trace = head.forward(&x).unwrap();
    let (_, g) = softmax_xent_batch(trace.logits(), &labels).unwrap();
    head.zero_grad();
    head.backward(&mut trace, &g).unwrap();
    let (index, mut analytic) = param_index(&head.conv_layers());
    let n_params = analytic.len();
    analytic.extend_from_slice(trace.input_grad().unwrap());
    probe(name, &analytic, seed, |i, delta| {
        if i < n_params {
            shift(head.conv_layers_mut(), index[i], delta);
            let v = loss(&head, &x);
            shift(head.conv_layers_mut(), index[i], -delta);
            v
        } else {
            let mut shifted = x.clone();
            shifted.values_mut()[i - n_params] += delta;
            loss(&head, &shifted)
        }
    })
}

/// Network, hypercolumn gather, head and loss together, as one training step sees them.
fn end_to_end_check(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = FeatureNet::<f64>::new(tiny_net_config(), &mut rng).unwrap();
    let d = net.config().plan(64, 64).unwrap().hypercolumn_len();
    let mut head = SegHead::<f64>::new(HeadConfig::new(HeadVariant::Fc, d, 3, 1.0 / 128.0), &mut rng).unwrap();
    let image = random_image(&mut rng, 64);
    let pixels = random_pixels(&mut rng, 64, 5);
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
    let drop_seed: u64 = rng.gen();
    let loss = |net: &mut FeatureNet<f64>, head: &SegHead<f64>| {
        let reg = net.forward(&image, Some(&mut ChaCha8Rng::seed_from_u64(drop_seed))).unwrap();
        let batch = gather_batch(&reg, &pixels, EPS).unwrap();
        softmax_xent_batch(head.forward(&batch).unwrap().logits(), &labels).unwrap().0
    };
    let mut reg = net.forward(&image, Some(&mut ChaCha8Rng::seed_from_u64(drop_seed))).unwrap();
    let batch = gather_batch(&reg, &pixels, EPS).unwrap();
    let mut trace = head.forward(&batch).unwrap();
    let (_, g) = softmax_xent_batch(trace.logits(), &labels).unwrap();
    net.zero_grad();
    head.zero_grad();
    head.backward(&mut trace, &g).unwrap();
    scatter_batch_grad(&mut reg, &pixels, EPS, trace.input_grad().unwrap()).unwrap();
    net.backward(&mut reg).unwrap();
    let (index, analytic) = param_index(&net.conv_layers());
    probe("network + head + loss", &analytic, seed, |i, delta| {
        shift(net.conv_layers_mut(), index[i], delta);
        let v = loss(&mut net, &head);
        shift(net.conv_layers_mut(), index[i], -delta);
        v
    })
}

pub fn all_checks() -> Vec<FdReport> {
    vec![
        conv_check("conv 3×3 stride 2 pad 1", [3, 7, 6], 4, 3, 2, 1, 1),
        conv_check("conv 1×1", [5, 4, 3], 6, 1, 1, 0, 2),
        conv_check("conv 2×2 stride 2", [2, 6, 6], 3, 2, 2, 0, 3),
        maxpool_check(4),
        relu_check(5),
        eltwise_check(6),
        concat_check(7),
        zero_pad_check(8),
        dropout_check(9),
        l2norm_check(10),
        xent_check(11),
        gather_check(12),
        feature_net_check(13),
        head_check("fc head", HeadVariant::Fc, 14),
        head_check("resblock head", HeadVariant::Resblock, 15),
        end_to_end_check(16),
    ]
}
