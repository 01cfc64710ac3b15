//! Segmentation metrics and operation-count estimates.

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::head::HeadConfig;
use crate::sampler::sample_fraction;

/// Counts indexed `[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; class_count]; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Adds one prediction/ground-truth pair; ground-truth pixels carrying
    /// `ignore_label` are skipped.
    pub fn add(&mut self, predicted: &[usize], truth: &[usize], ignore_label: Option<usize>) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(shape_err!(
                "{} predictions for {} ground-truth pixels",
                predicted.len(),
                truth.len()
            ));
        }
        let k = self.class_count();
        for (&p, &t) in predicted.iter().zip(truth) {
            if Some(t) == ignore_label {
                continue;
            }
            if t >= k || p >= k {
                return Err(invalid!("class index out of range for {k} classes (truth {t}, predicted {p})"));
            }
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        let k = self.class_count();
        let total: u64 = self.counts.iter().flatten().sum();
        if total == 0 {
            return Err(Error::NoValidPixels);
        }
        let correct: u64 = (0..k).map(|c| self.counts[c][c]).sum();
        let gt: Vec<u64> = self.counts.iter().map(|row| row.iter().sum()).collect();
        let pred: Vec<u64> = (0..k).map(|c| self.counts.iter().map(|row| row[c]).sum()).collect();
        let recalls: Vec<f64> = (0..k)
            .filter(|&c| gt[c] > 0)
            .map(|c| self.counts[c][c] as f64 / gt[c] as f64)
            .collect();
        let per_class_iu: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let union = gt[c] + pred[c] - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let ius: Vec<f64> = per_class_iu.iter().flatten().copied().collect();
        Ok(EvalReport {
            pixel_acc: correct as f64 / total as f64,
            mean_acc: recalls.iter().sum::<f64>() / recalls.len() as f64,
            mean_iu: ius.iter().sum::<f64>() / ius.len() as f64,
            per_class_iu,
            confusion: self.counts.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub pixel_acc: f64,
    /// Mean recall over classes present in the ground truth.
    pub mean_acc: f64,
    /// Mean IU over classes present in the ground truth or the prediction.
    pub mean_iu: f64,
    /// `None` for classes absent from both.
    pub per_class_iu: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate(
    predicted: &[usize],
    truth: &[usize],
    class_count: usize,
    ignore_label: Option<usize>,
) -> Result<EvalReport> {
    let mut m = ConfusionMatrix::new(class_count);
    m.add(predicted, truth, ignore_label)?;
    m.report()
}

/// Rough SLIC work per pixel and iteration: each pixel lies in about four
/// centre windows, each costing a five-term distance.
pub const SLIC_MACS_PER_PIXEL_ITER: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub budget: usize,
    pub head_macs_per_pixel: u64,
    /// Head applied to every pixel.
    pub dense_head_macs: u64,
    /// Head applied to the sampled pixels only.
    pub sampled_head_macs: u64,
    pub slic_macs: u64,
    pub sampled_total_macs: u64,
    /// budget / (height · width), exact.
    #[serde(serialize_with = "ratio_string")]
    pub sample_fraction: Ratio<u64>,
    /// sampled_total_macs / dense_head_macs.
    pub cost_ratio: f64,
}

fn ratio_string<S: serde::Serializer>(r: &Ratio<u64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

pub fn cost_report(
    height: usize,
    width: usize,
    budget: usize,
    head: &HeadConfig,
    slic_iters: usize,
) -> Result<CostReport> {
    let pixels = (height * width) as u64;
    if pixels == 0 || budget == 0 || budget as u64 > pixels {
        return Err(invalid!(
            "budget {budget} must lie between 1 and the pixel count {pixels}"
        ));
    }
    let per = head.macs_per_sample();
    let dense = per * pixels;
    let sampled = per * budget as u64;
    let slic = SLIC_MACS_PER_PIXEL_ITER * slic_iters as u64 * pixels;
    Ok(CostReport {
        height,
        width,
        budget,
        head_macs_per_pixel: per,
        dense_head_macs: dense,
        sampled_head_macs: sampled,
        slic_macs: slic,
        sampled_total_macs: sampled + slic,
        sample_fraction: sample_fraction(budget, height, width),
        cost_ratio: (sampled + slic) as f64 / dense as f64,
    })
}
