use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, AugmentConfig, DatasetFormat, DatasetHandle, DatasetSource, Split};
use crate::diet::LossConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::optim::OptimConfig;
use crate::synthetic::{self, Distribution};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Procedural target-distribution images.
    #[default]
    Synthetic,
    /// Train and validation splits read from disk.
    Files,
}

/// Target dataset: either generated or read from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Display name used in reports; defaults to the kind or train path.
    pub name: Option<String>,
    pub format: DatasetFormat,
    pub train_path: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub synthetic_train_size: usize,
    pub synthetic_val_size: usize,
    pub synthetic_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            name: None,
            format: DatasetFormat::RawContainer,
            train_path: None,
            train_labels: None,
            val_path: None,
            val_labels: None,
            num_classes: None,
            synthetic_train_size: 2048,
            synthetic_val_size: 1024,
            synthetic_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.kind {
            DatasetKind::Synthetic => "synthetic-target".into(),
            DatasetKind::Files => self
                .train_path
                .as_ref()
                .and_then(|p| p.file_stem())
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    fn source(&self, path: &Option<PathBuf>, labels: &Option<PathBuf>, split: Split, key: &str) -> Result<DatasetSource> {
        let path = path
            .clone()
            .ok_or_else(|| Error::Config(format!("Dataset.{key}_path is required when kind = \"files\"")))?;
        Ok(DatasetSource {
            path,
            format: self.format,
            labels: labels.clone(),
            num_classes: self.num_classes,
            split,
        })
    }

    /// Loads (or generates) the train and validation splits.
    pub fn load(&self, image_size: usize) -> Result<(DatasetHandle, DatasetHandle)> {
        match self.kind {
            DatasetKind::Synthetic => Ok((
                synthetic::generate(Distribution::Target, self.synthetic_train_size, image_size, Split::Train, self.synthetic_seed)?,
                synthetic::generate(Distribution::Target, self.synthetic_val_size, image_size, Split::Val, self.synthetic_seed)?,
            )),
            DatasetKind::Files => {
                let train = load_dataset(&self.source(&self.train_path, &self.train_labels, Split::Train, "train")?)?;
                let val = load_dataset(&self.source(&self.val_path, &self.val_labels, Split::Val, "val")?)?;
                if train.labels().is_none() || val.labels().is_none() {
                    return Err(Error::ingest(&train.source, "labels", "evaluation needs labels for both splits"));
                }
                Ok((train, val))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Synthetic => {
                if self.synthetic_train_size == 0 || self.synthetic_val_size == 0 {
                    return Err(Error::Config("Dataset synthetic sizes must be positive".into()));
                }
            }
            DatasetKind::Files => {
                if self.train_path.is_none() || self.val_path.is_none() {
                    return Err(Error::Config(
                        "Dataset.train_path and Dataset.val_path are required when kind = \"files\"".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// How the "pre" backbone is obtained: a stored checkpoint, or a short DIET
/// run on the synthetic source distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    pub checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub samples: usize,
    pub lr_max: f64,
    pub seed: u64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            epochs: 20,
            samples: 512,
            lr_max: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub cp_subset_size: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub sweep_sizes: Vec<usize>,
    /// Record a k-NN snapshot every this many epochs; 0 disables it.
    pub eval_every: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            cp_subset_size: 1000,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            sweep_sizes: vec![100, 1000],
            eval_every: 0,
        }
    }
}

/// Everything a run needs, one TOML table per component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "Dataset", default)]
    pub dataset: DatasetConfig,
    #[serde(rename = "ViTConfig", default)]
    pub vit: ViTConfig,
    #[serde(rename = "OptimConfig", default)]
    pub optim: OptimConfig,
    #[serde(rename = "LossConfig", default)]
    pub loss: LossConfig,
    #[serde(rename = "AugmentConfig", default)]
    pub augment: AugmentConfig,
    #[serde(rename = "EvalConfig", default)]
    pub eval: EvalConfig,
    #[serde(rename = "WarmStart", default)]
    pub warm_start: WarmStartConfig,
    #[serde(rename = "Experiment", default)]
    pub experiment: ExperimentSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.vit.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        if self.augment.output_size != self.vit.image_size {
            return Err(Error::Config(format!(
                "AugmentConfig.output_size {} differs from ViTConfig.image_size {}",
                self.augment.output_size, self.vit.image_size
            )));
        }
        if self.vit.depth < 2 {
            return Err(Error::Config(format!(
                "ViTConfig.depth {} is too shallow; continued pretraining needs at least 2 blocks",
                self.vit.depth
            )));
        }
        if self.optim.unfreeze_last_k > self.vit.depth {
            return Err(Error::Config(format!(
                "OptimConfig.unfreeze_last_k {} exceeds depth {}",
                self.optim.unfreeze_last_k, self.vit.depth
            )));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("Experiment.seeds must not be empty".into()));
        }
        if self.experiment.cp_subset_size == 0 {
            return Err(Error::Config("Experiment.cp_subset_size must be at least 1".into()));
        }
        if self.experiment.sweep_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("Experiment.sweep_sizes entries must be at least 1".into()));
        }
        if self.warm_start.checkpoint.is_none() && (self.warm_start.samples == 0 || !(self.warm_start.lr_max >= 0.0)) {
            return Err(Error::Config("WarmStart needs samples >= 1 and lr_max >= 0".into()));
        }
        Ok(())
    }
}
