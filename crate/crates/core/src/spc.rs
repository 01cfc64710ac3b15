//! Control charts over per-layer gradient magnitudes and the per-layer
//! learning-rate policy derived from them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::head::HeadTrace;
use crate::Scalar;

pub const DEFAULT_C: f64 = 6.0;

/// Per-slice absolute gradient sums of one layer at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub layer_id: String,
    pub slice_sums: Vec<f64>,
    pub epoch: usize,
    pub iteration: usize,
}

impl GradientSnapshot {
    /// `grad` is slice-major: `slices` consecutive runs of equal length.
    pub fn from_gradient<T: Scalar>(
        layer_id: impl Into<String>,
        grad: &[T],
        slices: usize,
        epoch: usize,
        iteration: usize,
    ) -> Result<Self> {
        if slices == 0 || grad.len() % slices != 0 {
            return Err(invalid!(
                "gradient of length {} cannot be split into {slices} slices",
                grad.len()
            ));
        }
        let k = grad.len() / slices;
        let slice_sums = grad
            .chunks(k)
            .map(|s| s.iter().map(|v| v.as_f64().abs()).sum())
            .collect();
        Ok(GradientSnapshot {
            layer_id: layer_id.into(),
            slice_sums,
            epoch,
            iteration,
        })
    }

    pub fn mean(&self) -> f64 {
        self.slice_sums.iter().sum::<f64>() / self.slice_sums.len() as f64
    }

    /// Population standard deviation over slices.
    pub fn std(&self) -> f64 {
        let mu = self.mean();
        let var = self.slice_sums.iter().map(|g| (g - mu) * (g - mu)).sum::<f64>()
            / self.slice_sums.len() as f64;
        var.sqrt()
    }
}

/// One snapshot per listed layer, taken from a head trace after backward.
/// Slices are output channels; the sum runs over samples.
pub fn snapshot_gradients<T: Scalar>(
    trace: &HeadTrace<T>,
    layer_ids: &[String],
    epoch: usize,
    iteration: usize,
) -> Result<Vec<GradientSnapshot>> {
    layer_ids
        .iter()
        .map(|id| {
            let out = trace
                .layer_output(id)
                .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
            let grad = out
                .grad()
                .ok_or_else(|| Error::MissingGradient(id.clone()))?;
            GradientSnapshot::from_gradient(id.as_str(), grad, out.shape()[0], epoch, iteration)
        })
        .collect()
}

/// Element-wise mean of several snapshots of the same layer; stamped with the
/// epoch and iteration of the last one.
pub fn aggregate(snapshots: &[GradientSnapshot]) -> Result<GradientSnapshot> {
    let last = snapshots
        .last()
        .ok_or_else(|| invalid!("no snapshots to aggregate"))?;
    let n = last.slice_sums.len();
    let mut sums = vec![0.0; n];
    for s in snapshots {
        if s.layer_id != last.layer_id || s.slice_sums.len() != n {
            return Err(invalid!(
                "cannot aggregate snapshots of `{}` and `{}`",
                s.layer_id,
                last.layer_id
            ));
        }
        for (d, g) in sums.iter_mut().zip(&s.slice_sums) {
            *d += g;
        }
    }
    let scale = snapshots.len() as f64;
    Ok(GradientSnapshot {
        layer_id: last.layer_id.clone(),
        slice_sums: sums.into_iter().map(|g| g / scale).collect(),
        epoch: last.epoch,
        iteration: last.iteration,
    })
}

/// Per-layer standard deviation recorded from an all-low-rate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub sigma_low: BTreeMap<String, f64>,
}

impl Baseline {
    pub fn sigma(&self, layer_id: &str) -> Result<f64> {
        self.sigma_low
            .get(layer_id)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// σ_low per layer: the snapshot standard deviations averaged per layer.
pub fn fit_baseline(snapshots: &[GradientSnapshot], layer_ids: &[String]) -> Result<Baseline> {
    let mut sigma_low = BTreeMap::new();
    for id in layer_ids {
        let stds: Vec<f64> = snapshots
            .iter()
            .filter(|s| &s.layer_id == id)
            .map(GradientSnapshot::std)
            .collect();
        if stds.is_empty() {
            return Err(invalid!("no baseline snapshots for layer `{id}`"));
        }
        sigma_low.insert(id.clone(), stds.iter().sum::<f64>() / stds.len() as f64);
    }
    Ok(Baseline { sigma_low })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlChart {
    pub layer_id: String,
    pub epoch: usize,
    pub iteration: usize,
    pub mu: f64,
    pub sigma: f64,
    pub sigma_low: f64,
    pub c: f64,
    pub ucl: f64,
    /// Fraction of slices above the upper limit.
    pub violation: f64,
}

pub fn evaluate_chart(snapshot: &GradientSnapshot, sigma_low: f64, c: f64) -> ControlChart {
    let mu = snapshot.mean();
    let ucl = mu + c * sigma_low;
    let above = snapshot.slice_sums.iter().filter(|&&g| g > ucl).count();
    ControlChart {
        layer_id: snapshot.layer_id.clone(),
        epoch: snapshot.epoch,
        iteration: snapshot.iteration,
        mu,
        sigma: snapshot.std(),
        sigma_low,
        c,
        ucl,
        violation: above as f64 / snapshot.slice_sums.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpcConfig {
    pub c: f64,
    /// Fraction of slices above the limit that counts as a violation.
    pub theta: f64,
    /// Consecutive violating evaluations before a layer is flagged.
    pub window: usize,
    pub high_multiplier: f64,
    pub hybrid1_multiplier: f64,
    pub hybrid2_multiplier: f64,
}

impl Default for SpcConfig {
    fn default() -> Self {
        SpcConfig {
            c: DEFAULT_C,
            theta: 0.05,
            window: 3,
            high_multiplier: 10.0,
            hybrid1_multiplier: 5.0,
            hybrid2_multiplier: 1.0,
        }
    }
}

impl SpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) || !(0.0..1.0).contains(&self.theta) || self.window == 0 {
            return Err(invalid!("spc needs c ≥ 0, 0 ≤ theta < 1 and window ≥ 1"));
        }
        for m in [self.high_multiplier, self.hybrid1_multiplier, self.hybrid2_multiplier] {
            if !(m > 0.0) {
                return Err(invalid!("learning-rate multipliers must be positive"));
            }
        }
        Ok(())
    }
}

/// Evaluates charts as snapshots arrive and tracks violation streaks.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: SpcConfig,
    baseline: Baseline,
    streaks: BTreeMap<String, usize>,
    flagged: BTreeSet<String>,
    history: Vec<(ControlChart, GradientSnapshot)>,
}

impl Monitor {
    pub fn new(config: SpcConfig, baseline: Baseline) -> Self {
        Monitor {
            config,
            baseline,
            streaks: BTreeMap::new(),
            flagged: BTreeSet::new(),
            history: Vec::new(),
        }
    }

    pub fn observe(&mut self, snapshot: GradientSnapshot) -> Result<&ControlChart> {
        let sigma_low = self.baseline.sigma(&snapshot.layer_id)?;
        let chart = evaluate_chart(&snapshot, sigma_low, self.config.c);
        let streak = self.streaks.entry(snapshot.layer_id.clone()).or_default();
        if chart.violation > self.config.theta {
            *streak += 1;
            if *streak >= self.config.window {
                self.flagged.insert(snapshot.layer_id.clone());
            }
        } else {
            *streak = 0;
        }
        self.history.push((chart, snapshot));
        Ok(&self.history.last().expect("just pushed").0)
    }

    pub fn flagged(&self) -> &BTreeSet<String> {
        &self.flagged
    }

    pub fn charts(&self) -> impl Iterator<Item = &ControlChart> {
        self.history.iter().map(|(c, _)| c)
    }

    /// Writes `<layer>.csv` per layer with one row per slice per evaluation.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut writers: BTreeMap<&str, csv::Writer<std::fs::File>> = BTreeMap::new();
        let mut paths = Vec::new();
        for (chart, snap) in &self.history {
            if !writers.contains_key(chart.layer_id.as_str()) {
                let path = dir.join(format!("{}.csv", chart.layer_id));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["iteration", "slice_index", "g", "mu", "ucl"])?;
                writers.insert(&chart.layer_id, w);
                paths.push(path);
            }
            let w = writers.get_mut(chart.layer_id.as_str()).expect("inserted");
            for (i, g) in snap.slice_sums.iter().enumerate() {
                w.write_record([
                    chart.iteration.to_string(),
                    i.to_string(),
                    g.to_string(),
                    chart.mu.to_string(),
                    chart.ucl.to_string(),
                ])?;
            }
        }
        for w in writers.values_mut() {
            w.flush().map_err(|e| Error::io(dir, e))?;
        }
        Ok(paths)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    AllLow,
    AllHigh,
    Hybrid1,
    Hybrid2,
    Auto,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all-low" => PolicyKind::AllLow,
            "all-high" => PolicyKind::AllHigh,
            "hybrid1" => PolicyKind::Hybrid1,
            "hybrid2" => PolicyKind::Hybrid2,
            "auto" => PolicyKind::Auto,
            other => return Err(invalid!("unknown policy `{other}`")),
        })
    }
}

/// Learning-rate multipliers for the layers after sampling. Layers not listed
/// (backbone and pyramid) train at the base rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRatePolicy {
    pub multipliers: Vec<(String, f64)>,
    pub flagged: BTreeSet<String>,
}

impl LearningRatePolicy {
    pub fn uniform(layer_ids: &[String], multiplier: f64) -> Self {
        LearningRatePolicy {
            multipliers: layer_ids.iter().map(|id| (id.clone(), multiplier)).collect(),
            flagged: BTreeSet::new(),
        }
    }

    pub fn multiplier(&self, layer_id: &str) -> f64 {
        self.multipliers
            .iter()
            .find(|(id, _)| id == layer_id)
            .map_or(1.0, |&(_, m)| m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `layer_ids` run from the sampling layer to the loss. All layers start at
/// `high`; the flagged layer closest to the loss and every layer after it
/// drop to `reduced`.
pub fn derive_policy(
    layer_ids: &[String],
    flagged: &BTreeSet<String>,
    high: f64,
    reduced: f64,
) -> Result<LearningRatePolicy> {
    if !(high > 0.0 && reduced > 0.0) {
        return Err(invalid!("learning-rate multipliers must be positive"));
    }
    if let Some(unknown) = flagged.iter().find(|f| !layer_ids.contains(f)) {
        return Err(Error::UnknownLayer(unknown.clone()));
    }
    let anchor = layer_ids.iter().rposition(|id| flagged.contains(id));
    let multipliers = layer_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let m = match anchor {
                Some(a) if i >= a => reduced,
                _ => high,
            };
            (id.clone(), m)
        })
        .collect();
    Ok(LearningRatePolicy {
        multipliers,
        flagged: flagged.clone(),
    })
}
