//! Independent reference implementations and random inputs for the
//! property and acceptance tests.

use std::collections::VecDeque;

use rand::Rng;
use spseg::superpixel::SuperpixelMap;
use spseg::Tensor;

#[derive(Debug, PartialEq)]
pub struct OracleMetrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iu: f64,
    pub per_class_iu: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

/// Per-class TP/FP/FN counted pixel by pixel, one class at a time.
pub fn brute_force_metrics(pred: &[usize], truth: &[usize], k: usize, ignore: Option<usize>) -> Option<OracleMetrics> {
    let valid: Vec<usize> = (0..truth.len()).filter(|&i| Some(truth[i]) != ignore).collect();
    if valid.is_empty() {
        return None;
    }
    let mut confusion = vec![vec![0u64; k]; k];
    let mut correct = 0u64;
    for &i in &valid {
        confusion[truth[i]][pred[i]] += 1;
        if truth[i] == pred[i] {
            correct += 1;
        }
    }
    let mut recall_sum = 0.0;
    let mut recall_n = 0;
    let mut iu_sum = 0.0;
    let mut iu_n = 0;
    let mut per_class_iu = Vec::with_capacity(k);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for &i in &valid {
            match (truth[i] == c, pred[i] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fn_ > 0 {
            recall_sum += tp as f64 / (tp + fn_) as f64;
            recall_n += 1;
        }
        if tp + fp + fn_ > 0 {
            let iu = tp as f64 / (tp + fp + fn_) as f64;
            iu_sum += iu;
            iu_n += 1;
            per_class_iu.push(Some(iu));
        } else {
            per_class_iu.push(None);
        }
    }
    Some(OracleMetrics {
        pixel_acc: correct as f64 / valid.len() as f64,
        mean_acc: recall_sum / recall_n as f64,
        mean_iu: iu_sum / iu_n as f64,
        per_class_iu,
        confusion,
    })
}

/// Random prediction / ground-truth pair; some ground truth may be `ignore`.
pub fn random_label_pair<R: Rng>(rng: &mut R) -> (Vec<usize>, Vec<usize>, usize, Option<usize>) {
    let k = rng.gen_range(1..8);
    let n = rng.gen_range(1..400);
    let ignore = rng.gen_bool(0.5).then_some(255);
    let truth = (0..n)
        .map(|_| match ignore {
            Some(v) if rng.gen_bool(0.1) => v,
            _ => rng.gen_range(0..k),
        })
        .collect();
    let pred = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (pred, truth, k, ignore)
}

/// Flood fill over 4-neighbours: every label forms one component and every
/// pixel carries a label below the region count.
pub fn is_total_connected_partition(map: &SuperpixelMap) -> bool {
    let (h, w) = map.image_shape();
    let labels = map.labels();
    let n = map.n_regions();
    if labels.len() != h * w || labels.iter().any(|&l| l as usize >= n) {
        return false;
    }
    let mut seen_label = vec![false; n];
    let mut visited = vec![false; h * w];
    for start in 0..h * w {
        if visited[start] {
            continue;
        }
        let l = labels[start];
        if seen_label[l as usize] {
            return false;
        }
        seen_label[l as usize] = true;
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !visited[j] && labels[j] == l {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
    }
    seen_label.iter().all(|&s| s)
}

/// Voronoi colour blobs mixed with uniform noise; every fourth case is pure noise.
pub fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize, pure_noise: bool) -> Tensor {
    let noise: f64 = if pure_noise { 1.0 } else { rng.gen_range(0.0..0.3) };
    let blobs: Vec<(f64, f64, [f64; 3])> = (0..rng.gen_range(1..8))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                [rng.gen(), rng.gen(), rng.gen()],
            )
        })
        .collect();
    let mut v = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let d = |b: &(f64, f64, [f64; 3])| (b.0 - y as f64).powi(2) + (b.1 - x as f64).powi(2);
            let b = blobs
                .iter()
                .min_by(|a, b| d(a).total_cmp(&d(b)))
                .expect("at least one blob");
            for c in 0..3 {
                let n: f64 = rng.gen_range(-1.0..1.0) * noise;
                v[c * h * w + y * w + x] = (b.2[c] * (1.0 - noise) + n.abs()).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], v).expect("sized above")
}
