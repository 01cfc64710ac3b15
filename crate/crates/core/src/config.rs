//! Experiment configuration: a TOML file with one section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ShapesConfig;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadVariant};
use crate::hypercolumn::FeatureNetConfig;
use crate::spc::{PolicyKind, SpcConfig};
use crate::trainer::{SamplingConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated shapes; the last `eval_count` items are held out.
    Shapes,
    /// PNG pairs listed in `train_list` / `eval_list`.
    List,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub shapes: ShapesConfig,
    pub eval_count: usize,
    pub train_list: Option<PathBuf>,
    pub eval_list: Option<PathBuf>,
    pub class_count: Option<usize>,
    pub ignore_label: Option<usize>,
    /// [height, width] applied to list datasets.
    pub resize: Option<[usize; 2]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Shapes,
            shapes: ShapesConfig {
                count: 250,
                ..ShapesConfig::default()
            },
            eval_count: 50,
            train_list: None,
            eval_list: None,
            class_count: None,
            ignore_label: None,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub variant: HeadVariant,
    pub width_factor: f64,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            variant: HeadVariant::Fc,
            width_factor: 1.0 / 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// Layers treated as flagged by the hybrid policies.
    pub flagged: Vec<String>,
    /// Policy JSON written by `diagnose-spc`; takes precedence over `kind`.
    pub file: Option<PathBuf>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::AllLow,
            flagged: Vec::new(),
            file: None,
        }
    }
}

/// Length of the paired short runs used to fit and test control charts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub epochs: usize,
    pub images: usize,
    /// Also train with the derived policy and report its final loss.
    pub compare: bool,
    /// Which reduced rate the derived policy uses.
    pub hybrid: PolicyKind,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            epochs: 16,
            images: 50,
            compare: true,
            hybrid: PolicyKind::Hybrid2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub net: FeatureNetConfig,
    pub head: HeadSection,
    pub sampler: SamplingConfig,
    pub train: TrainConfig,
    pub spc: SpcConfig,
    pub policy: PolicySection,
    pub diagnose: DiagnoseSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_list,
            &mut cfg.data.eval_list,
            &mut cfg.policy.file,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Head layer ids for a dataset of `classes` classes at `input` size.
    pub fn head_layer_ids(&self, classes: usize, input: (usize, usize)) -> Result<Vec<String>> {
        let in_dim = self.net.plan(input.0, input.1)?.hypercolumn_len();
        let head = HeadConfig::new(self.head.variant, in_dim, classes, self.head.width_factor);
        Ok(head.layer_ids())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.net.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        self.spc.validate().map_err(cfg_err)?;
        if !(self.head.width_factor > 0.0) {
            return Err(Error::Config("head.width_factor must be positive".into()));
        }
        if self.sampler.budget == 0 || self.sampler.superpixels == 0 {
            return Err(Error::Config("sampler.budget and sampler.superpixels must be positive".into()));
        }
        match self.data.source {
            DataSource::Shapes => {
                if self.data.eval_count >= self.data.shapes.count {
                    return Err(Error::Config(
                        "data.eval_count must leave training items in data.shapes.count".into(),
                    ));
                }
            }
            DataSource::List => {
                if self.data.train_list.is_none() || self.data.class_count.is_none() {
                    return Err(Error::Config(
                        "list datasets need data.train_list and data.class_count".into(),
                    ));
                }
            }
        }
        if self.diagnose.epochs == 0 || self.diagnose.images == 0 {
            return Err(Error::Config("diagnose.epochs and diagnose.images must be positive".into()));
        }
        if !matches!(self.diagnose.hybrid, PolicyKind::Hybrid1 | PolicyKind::Hybrid2) {
            return Err(Error::Config("diagnose.hybrid must be hybrid1 or hybrid2".into()));
        }
        Ok(())
    }
}
