//! End-to-end runs: training, evaluation, the control-chart diagnosis and
//! file exports. Every run that writes files echoes its config first.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{split, synthetic_shapes, Dataset};
use crate::error::{invalid, Error, Result};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::spc::{derive_policy, fit_baseline, Baseline, LearningRatePolicy, Monitor, PolicyKind};
use crate::superpixel::{write_csv, write_png16};
use crate::trainer::{derive_seed, EpochReport, Model, SamplingConfig, TrainConfig, Trainer};
use crate::Scalar;

pub struct Datasets {
    pub train: Dataset,
    pub eval: Option<Dataset>,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    match d.source {
        DataSource::Shapes => {
            let all = synthetic_shapes(&d.shapes)?;
            if d.eval_count == 0 {
                return Ok(Datasets {
                    train: all,
                    eval: None,
                });
            }
            let (train, eval) = split(&all, all.len() - d.eval_count)?;
            Ok(Datasets {
                train,
                eval: Some(eval),
            })
        }
        DataSource::List => {
            let classes = d
                .class_count
                .ok_or_else(|| Error::Config("data.class_count is required for list datasets".into()))?;
            let resize = d.resize.map(|[h, w]| (h, w));
            let load = |p: &Path| Dataset::load_list(p, classes, d.ignore_label, resize);
            let train = load(
                d.train_list
                    .as_deref()
                    .ok_or_else(|| Error::Config("data.train_list is required".into()))?,
            )?;
            let eval = d.eval_list.as_deref().map(load).transpose()?;
            Ok(Datasets { train, eval })
        }
    }
}

pub fn build_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model<f64>> {
    Model::new(
        cfg.net.clone(),
        cfg.head.variant,
        cfg.head.width_factor,
        data.class_count(),
        data.image_shape(),
        cfg.train.seed,
    )
}

/// Policy for a non-`auto` kind. A policy file, when configured, wins.
pub fn resolve_policy(cfg: &ExperimentConfig, head_ids: &[String]) -> Result<LearningRatePolicy> {
    if let Some(path) = &cfg.policy.file {
        return LearningRatePolicy::load(path);
    }
    let spc = &cfg.spc;
    let hybrid = |reduced: f64| {
        if cfg.policy.flagged.is_empty() {
            return Err(Error::Config(
                "hybrid policies need policy.flagged or policy.file (see diagnose-spc)".into(),
            ));
        }
        derive_policy(
            head_ids,
            &cfg.policy.flagged.iter().cloned().collect(),
            spc.high_multiplier,
            reduced,
        )
    };
    match cfg.policy.kind {
        PolicyKind::AllLow => Ok(LearningRatePolicy::uniform(head_ids, 1.0)),
        PolicyKind::AllHigh => Ok(LearningRatePolicy::uniform(head_ids, spc.high_multiplier)),
        PolicyKind::Hybrid1 => hybrid(spc.hybrid1_multiplier),
        PolicyKind::Hybrid2 => hybrid(spc.hybrid2_multiplier),
        PolicyKind::Auto => Err(invalid!("the auto policy is resolved by running the diagnosis")),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the resolved config as `config.toml` in `out`.
pub fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

#[derive(Serialize)]
struct LogRecord<'a> {
    epoch: usize,
    iteration: usize,
    loss: f64,
    lr: &'a BTreeMap<String, f64>,
}

/// Effective rate of the feature layers and of every head layer.
fn rate_groups(policy: &LearningRatePolicy, train: &TrainConfig, head_ids: &[String], epoch: usize) -> BTreeMap<String, f64> {
    let mut rates = BTreeMap::new();
    rates.insert("features".to_string(), train.effective_lr(1.0, epoch));
    for id in head_ids {
        rates.insert(id.clone(), train.effective_lr(policy.multiplier(id), epoch));
    }
    rates
}

pub struct TrainOutcome {
    pub model: Model<f64>,
    pub policy: LearningRatePolicy,
    pub reports: Vec<EpochReport>,
    pub eval: Option<EvalReport>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.mean_loss)
    }
}

/// Trains on `data` with an explicit policy. With `out`, writes the training
/// log and checkpoints there.
pub fn train_with_policy(
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    policy: LearningRatePolicy,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<(Model<f64>, Vec<EpochReport>)> {
    let model = build_model(cfg, data)?;
    let head_ids = model.head_layer_ids();
    let mut trainer = Trainer::new(model, train_cfg.clone(), cfg.sampler.clone(), policy)?;
    let mut log = match out {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(train_cfg.total_epochs);
    for epoch in 0..train_cfg.total_epochs {
        let report = trainer.train_epoch(data, epoch)?;
        if let (Some((file, path)), Some(dir)) = (log.as_mut(), out) {
            let rates = rate_groups(&trainer.policy, train_cfg, &head_ids, epoch);
            let first = report.iteration - report.losses.len();
            for (i, &loss) in report.losses.iter().enumerate() {
                let line = serde_json::to_string(&LogRecord {
                    epoch,
                    iteration: first + i,
                    loss,
                    lr: &rates,
                })?;
                writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            let every = train_cfg.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                trainer.model.save(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
            }
        }
        progress(&report);
        reports.push(report);
    }
    if let Some(dir) = out {
        trainer.model.save(&dir.join("model.ckpt"))?;
    }
    Ok((trainer.model, reports))
}

/// `train` subcommand: resolves the policy (running the diagnosis for
/// `auto`), trains, and evaluates on the held-out split when there is one.
pub fn train_run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_run_with(cfg, out, &mut |_| {})
}

/// [`train_run`] with a callback after every epoch of the main run.
pub fn train_run_with(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        echo_config(cfg, dir)?;
    }
    let data = load_datasets(cfg)?;
    let policy = if cfg.policy.kind == PolicyKind::Auto && cfg.policy.file.is_none() {
        diagnose_spc(cfg, out.map(|d| d.join("diagnose")).as_deref())?.policy
    } else {
        let head_ids = cfg.head_layer_ids(data.train.class_count(), data.train.image_shape())?;
        resolve_policy(cfg, &head_ids)?
    };
    if let Some(dir) = out {
        policy.save(&dir.join("policy.json"))?;
    }
    let (model, reports) = train_with_policy(cfg, &cfg.train, &data.train, policy.clone(), out, progress)?;
    let eval = match &data.eval {
        Some(eval) => {
            let report = evaluate_model(&model, eval, &cfg.sampler, cfg.train.seed)?;
            if let Some(dir) = out {
                write_json(&dir.join("metrics.json"), &report)?;
            }
            Some(report)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        policy,
        reports,
        eval,
    })
}

/// Dense predictions for every item, scored against its labels.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<EvalReport> {
    predict_dataset(model, dataset, sampling, seed, |_, _| Ok(()))
}

fn predict_dataset<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    sampling: &SamplingConfig,
    seed: u64,
    mut sink: impl FnMut(usize, &[usize]) -> Result<()>,
) -> Result<EvalReport> {
    let items = dataset.items();
    let predict = |i: usize| -> Result<Vec<usize>> {
        let map = sampling.superpixels_of(&items[i].image)?;
        model.predict(&items[i].image_as::<T>(), &map, derive_seed(&[seed, i as u64]))
    };
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let mut predictions: Vec<Option<Result<Vec<usize>>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = items.len().div_ceil(workers).max(1);
        for (c, slots) in predictions.chunks_mut(chunk).enumerate() {
            let predict = &predict;
            scope.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(predict(c * chunk + k));
                }
            });
        }
    });
    let mut confusion = ConfusionMatrix::new(dataset.class_count());
    for (i, p) in predictions.into_iter().enumerate() {
        let predicted = p.expect("every slot is filled")?;
        confusion.add(&predicted, &items[i].labels, dataset.ignore_label())?;
        sink(i, &predicted)?;
    }
    confusion.report()
}

/// `eval` subcommand: scores a checkpoint on the evaluation split (or the
/// training data when there is none). With `out`, writes `metrics.json` and
/// one label PNG per item under `predictions/`.
pub fn eval_run(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let model = Model::<f64>::load(checkpoint)?;
    let data = load_datasets(cfg)?;
    let dataset = data.eval.as_ref().unwrap_or(&data.train);
    let pred_dir = out.map(|d| d.join("predictions"));
    if let (Some(dir), Some(pred)) = (out, &pred_dir) {
        echo_config(cfg, dir)?;
        create_dir(pred)?;
    }
    let report = predict_dataset(&model, dataset, &cfg.sampler, cfg.train.seed, |i, labels| {
        let Some(dir) = &pred_dir else { return Ok(()) };
        let item = &dataset.items()[i];
        let (h, w) = item.shape();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([labels[y as usize * w + x as usize] as u16]));
        img.save(dir.join(format!("{}.png", item.name)))?;
        Ok(())
    })?;
    if let Some(dir) = out {
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseOutcome {
    pub baseline: Baseline,
    /// Layers flagged when the low-rate run is charted against its own baseline.
    pub low_flagged: Vec<String>,
    pub high_flagged: Vec<String>,
    pub policy: LearningRatePolicy,
    pub low_loss: f64,
    pub high_loss: f64,
    /// Final loss of a run with the derived policy, when requested.
    pub hybrid_loss: Option<f64>,
}

/// Short all-low and all-high runs on the first `diagnose.images` items.
/// The low run fixes σ_low; both runs are charted against it and the
/// high run's flags give the hybrid policy.
pub fn diagnose_spc(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<DiagnoseOutcome> {
    if let Some(dir) = out {
        echo_config(cfg, dir)?;
    }
    let data = load_datasets(cfg)?;
    let n = cfg.diagnose.images.min(data.train.len());
    let subset = Dataset::new(
        data.train.items()[..n].to_vec(),
        data.train.class_count(),
        data.train.ignore_label(),
    )?;
    let epochs = cfg.diagnose.epochs;
    let train_cfg = TrainConfig {
        total_epochs: epochs,
        lr_drop_epoch: epochs,
        monitor_start_epoch: Some(((epochs as f64) * 12.0 / 16.0).round() as usize),
        checkpoint_every: 0,
        ..cfg.train.clone()
    };
    let head_ids = cfg.head_layer_ids(subset.class_count(), subset.image_shape())?;
    let spc = &cfg.spc;
    let run = |multiplier: f64| {
        let policy = LearningRatePolicy::uniform(&head_ids, multiplier);
        train_with_policy(cfg, &train_cfg, &subset, policy, None, &mut |_| {}).map(|(_, r)| r)
    };
    let snapshots = |reports: &[EpochReport]| -> Vec<_> {
        reports.iter().flat_map(|r| r.snapshots.iter().cloned()).collect()
    };
    let low = run(1.0)?;
    let low_snaps = snapshots(&low);
    let baseline = fit_baseline(&low_snaps, &head_ids)?;
    let high = run(spc.high_multiplier)?;
    let chart = |snaps: Vec<_>, name: &str| -> Result<Monitor> {
        let mut m = Monitor::new(spc.clone(), baseline.clone());
        for s in snaps {
            m.observe(s)?;
        }
        if let Some(dir) = out {
            m.write_csv(&dir.join("charts").join(name))?;
        }
        Ok(m)
    };
    let low_monitor = chart(low_snaps, "low")?;
    let high_monitor = chart(snapshots(&high), "high")?;
    let reduced = match cfg.diagnose.hybrid {
        PolicyKind::Hybrid1 => spc.hybrid1_multiplier,
        _ => spc.hybrid2_multiplier,
    };
    let policy = derive_policy(&head_ids, high_monitor.flagged(), spc.high_multiplier, reduced)?;
    let hybrid_loss = if cfg.diagnose.compare {
        let (_, r) = train_with_policy(cfg, &train_cfg, &subset, policy.clone(), None, &mut |_| {})?;
        r.last().map(|r| r.mean_loss)
    } else {
        None
    };
    let outcome = DiagnoseOutcome {
        baseline,
        low_flagged: low_monitor.flagged().iter().cloned().collect(),
        high_flagged: high_monitor.flagged().iter().cloned().collect(),
        policy,
        low_loss: low.last().map_or(f64::NAN, |r| r.mean_loss),
        high_loss: high.last().map_or(f64::NAN, |r| r.mean_loss),
        hybrid_loss,
    };
    if let Some(dir) = out {
        outcome.baseline.save(&dir.join("baseline.json"))?;
        outcome.policy.save(&dir.join("policy.json"))?;
        write_json(&dir.join("diagnose.json"), &outcome)?;
    }
    Ok(outcome)
}

/// `export-superpixels`: a 16-bit PNG and a CSV of every training item's
/// superpixel map. Returns the written PNG paths.
pub fn export_superpixels(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    echo_config(cfg, out)?;
    let data = load_datasets(cfg)?;
    let mut written = Vec::new();
    for item in data.train.items() {
        let map = cfg.sampler.superpixels_of(&item.image)?;
        let png = out.join(format!("{}_superpixels.png", item.name));
        write_png16(&map, &png)?;
        write_csv(&map, &out.join(format!("{}_superpixels.csv", item.name)))?;
        written.push(png);
    }
    Ok(written)
}
