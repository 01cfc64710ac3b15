//! Per-image pixel sampling from superpixels, and the inverse scatter of
//! per-sample predictions back to a dense label map.

use std::collections::BTreeSet;
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::superpixel::SuperpixelMap;
use crate::Scalar;

/// Redraws allowed inside one superpixel when a draw lands on the ignore label.
pub const IGNORE_REDRAWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sample {
    pub row: usize,
    pub col: usize,
    pub superpixel: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub budget: usize,
    pub rng_seed: u64,
}

impl SampleSet {
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.samples.iter().map(|s| (s.row, s.col)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "col", "superpixel_id", "label"])?;
        for s in &self.samples {
            w.serialize((s.row, s.col, s.superpixel, s.label))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Exact sampled fraction of an image.
pub fn sample_fraction(budget: usize, height: usize, width: usize) -> Ratio<u64> {
    Ratio::new(budget as u64, (height * width) as u64)
}

/// Draws exactly `budget` pixels. Up to one pixel from each of `budget`
/// distinct superpixels; beyond `n_regions`, randomly chosen superpixels
/// give a second, distinct pixel. Labels are read at the sampled pixel.
pub fn draw_samples(
    map: &SuperpixelMap,
    labels: &[usize],
    budget: usize,
    ignore_label: Option<usize>,
    seed: u64,
) -> Result<SampleSet> {
    let (h, w) = map.image_shape();
    if labels.len() != h * w {
        return Err(shape_err!(
            "label map of {} pixels for a {h}×{w} superpixel map",
            labels.len()
        ));
    }
    let n = map.n_regions();
    if budget == 0 {
        return Err(invalid!("sample budget must be at least 1"));
    }
    if budget > 2 * n {
        return Err(invalid!(
            "budget {budget} exceeds two samples for each of {n} superpixels"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = map.region_pixels();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let draw = |region: usize, exclude: Option<usize>, rng: &mut ChaCha8Rng| -> Option<usize> {
        let candidates: Vec<usize> = pixels[region]
            .iter()
            .copied()
            .filter(|&p| Some(p) != exclude)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        (0..=IGNORE_REDRAWS)
            .map(|_| candidates[rng.gen_range(0..candidates.len())])
            .find(|&i| ignore_label != Some(labels[i]))
    };

    let mut samples = Vec::with_capacity(budget);
    let mut first: Vec<Option<usize>> = vec![None; n];
    for &region in &order {
        if samples.len() == budget {
            break;
        }
        if let Some(i) = draw(region, None, &mut rng) {
            first[region] = Some(i);
            samples.push(Sample {
                row: i / w,
                col: i % w,
                superpixel: region,
                label: labels[i],
            });
        }
    }
    if samples.len() < budget {
        let mut seconds: Vec<usize> = order.iter().copied().filter(|&r| first[r].is_some()).collect();
        seconds.shuffle(&mut rng);
        for region in seconds {
            if samples.len() == budget {
                break;
            }
            if let Some(i) = draw(region, first[region], &mut rng) {
                samples.push(Sample {
                    row: i / w,
                    col: i % w,
                    superpixel: region,
                    label: labels[i],
                });
            }
        }
    }
    if samples.len() < budget {
        return Err(invalid!(
            "only {} valid samples available for a budget of {budget}",
            samples.len()
        ));
    }
    Ok(SampleSet {
        samples,
        budget,
        rng_seed: seed,
    })
}

/// One random pixel from every superpixel, for inference.
pub fn inference_samples(map: &SuperpixelMap, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = map.width();
    map.region_pixels()
        .into_iter()
        .enumerate()
        .map(|(region, px)| {
            let i = px[rng.gen_range(0..px.len())];
            (i / w, i % w, region)
        })
        .collect()
}

/// Gives every pixel its superpixel's class. Each entry is
/// (superpixel id, class probabilities); a superpixel with several entries
/// takes the class of highest summed probability, ties to the lower index.
pub fn scatter_predictions<T: Scalar>(
    map: &SuperpixelMap,
    per_sample: &[(usize, Vec<T>)],
) -> Result<Vec<usize>> {
    let n = map.n_regions();
    let mut sums: Vec<Option<Vec<T>>> = vec![None; n];
    for (region, probs) in per_sample {
        let slot = sums
            .get_mut(*region)
            .ok_or_else(|| invalid!("superpixel id {region} out of range for {n} regions"))?;
        match slot {
            Some(acc) => {
                if acc.len() != probs.len() {
                    return Err(shape_err!("inconsistent class counts in predictions"));
                }
                acc.iter_mut().zip(probs).for_each(|(a, &p)| *a += p);
            }
            None => *slot = Some(probs.clone()),
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&r| sums[r].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingSuperpixels(missing));
    }
    let class_of: Vec<usize> = sums
        .into_iter()
        .map(|s| {
            let s = s.expect("checked above");
            let mut best = 0;
            for (c, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(map.labels().iter().map(|&r| class_of[r as usize]).collect())
}

/// Hard-label variant of [`scatter_predictions`].
pub fn scatter_classes(map: &SuperpixelMap, per_sample: &[(usize, usize)], n_classes: usize) -> Result<Vec<usize>> {
    let probs: Vec<(usize, Vec<f64>)> = per_sample
        .iter()
        .map(|&(r, c)| {
            if c >= n_classes {
                return Err(invalid!("class {c} out of range for {n_classes} classes"));
            }
            let mut p = vec![0.0; n_classes];
            p[c] = 1.0;
            Ok((r, p))
        })
        .collect::<Result<_>>()?;
    scatter_predictions(map, &probs)
}

/// Distinct superpixel ids in a sample set.
pub fn covered_regions(set: &SampleSet) -> BTreeSet<usize> {
    set.samples.iter().map(|s| s.superpixel).collect()
}
