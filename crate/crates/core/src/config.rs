//! Run configuration: a JSON file with every field optional, plus
//! `key=value` overrides. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_idx, split_val, Blobs, Dataset};
use crate::error::{DressError, Result};
use crate::net::optim::SgdConfig;
use crate::net::spec::NetworkSpec;
use crate::sampling::validate_levels;

/// Running-statistics policy while subnets train jointly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// One BN state; every subnet's forward updates the running statistics.
    Shared,
    /// Shared scale and shift, but each level keeps its own running
    /// statistics, untouched by the other levels.
    PerLevelFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs; train and test draw independent streams around the same means.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_train_samples")]
        train: usize,
        #[serde(default = "default_train_samples")]
        test: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_classes")]
        classes: usize,
        /// Keep only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    784
}
fn default_train_samples() -> usize {
    10_000
}
fn default_spread() -> f64 {
    1.0
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            classes: default_classes(),
            dim: default_dim(),
            train: default_train_samples(),
            test: default_train_samples(),
            spread: default_spread(),
            seed: None,
        }
    }
}

/// Train, validation and test splits of one run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name (`mlp`, `mlp-small`, `convnet`, `resnet20`, `resnet50`).
    pub arch: String,
    pub data: DataConfig,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Sparsity ladder `s_1 < ... < s_K`.
    pub levels: Vec<f64>,
    /// Loss-weight exponent.
    pub gamma: f64,
    pub bn_mode: BnMode,
    pub bn_epochs: usize,
    pub bn_lr: f64,
    /// Pruning fractions of the target sparsity, ending at 1.
    pub schedule: Vec<f64>,
    pub finetune_epochs: usize,
    /// Fraction of the test data held out for validation.
    pub val_fraction: f64,
    /// Log gradient cosines every this many iterations (0 = off).
    pub cosine_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: "mlp".into(),
            data: DataConfig::default(),
            seed: 0,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            batch_size: 128,
            epochs: 30,
            pretrain_epochs: 10,
            levels: vec![0.5, 0.8, 0.9],
            gamma: 0.5,
            bn_mode: BnMode::Shared,
            bn_epochs: 1,
            bn_lr: 0.01,
            schedule: vec![0.5, 0.8, 0.9, 0.95, 1.0],
            finetune_epochs: 5,
            val_fraction: 0.2,
            cosine_every: 0,
        }
    }
}

/// Sets `path` (dot-separated) in a JSON object. The value is parsed as JSON
/// when possible, otherwise taken as a string.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| DressError::config(format!("'{}' is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl TrainConfig {
    /// Parses a config document, then applies `key=value` overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)?;
        if !doc.is_object() {
            return Err(DressError::config("config must be a JSON object"));
        }
        // Overriding a data field of the default data source needs the tag.
        let touches_data = overrides.iter().any(|o| o.starts_with("data."));
        if touches_data && doc.get("data").is_none() {
            doc["data"] = serde_json::to_value(DataConfig::default())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| DressError::config(format!("override '{}' is not key=value", o)))?;
            set_path(&mut doc, k.trim(), v.trim())?;
        }
        let cfg: TrainConfig =
            serde_json::from_value(doc).map_err(|e| DressError::config(format!("config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| DressError::config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        validate_levels(&self.levels)?;
        if self.batch_size == 0 {
            return Err(DressError::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.bn_lr >= 0.0) {
            return Err(DressError::config("learning rates must be positive"));
        }
        if self.schedule.is_empty()
            || self.schedule.windows(2).any(|w| w[1] < w[0])
            || self.schedule.iter().any(|&p| !(p > 0.0 && p <= 1.0))
            || *self.schedule.last().unwrap() != 1.0
        {
            return Err(DressError::config(format!(
                "pruning schedule {:?} must be non-decreasing in (0, 1] and end at 1",
                self.schedule
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(DressError::config("val_fraction must lie in (0, 1)"));
        }
        if self.levels.last() == Some(&1.0) && self.gamma < 0.0 {
            return Err(DressError::config("a fully sparse level needs gamma >= 0"));
        }
        NetworkSpec::preset(&self.arch)?;
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    /// The preset network, with its input and output resized to the data.
    pub fn network(&self, data: &Dataset) -> Result<NetworkSpec> {
        let net = match self.arch.as_str() {
            "mlp" => NetworkSpec::mlp(&[data.sample_len()], &[256, 128], data.classes, true),
            "mlp-small" => NetworkSpec::mlp(&[data.sample_len()], &[64, 32], data.classes, true),
            "convnet" if data.sample_shape.len() == 3 => NetworkSpec::convnet(&data.sample_shape, data.classes),
            _ => NetworkSpec::preset(&self.arch)?,
        };
        net.validate()?;
        Ok(net)
    }

    /// Loads or generates the data, then splits the test part into
    /// validation and test sets.
    pub fn load_data(&self) -> Result<Splits> {
        let (train, test) = match &self.data {
            DataConfig::Synthetic {
                classes,
                dim,
                train,
                test,
                spread,
                seed,
            } => {
                let blobs = Blobs {
                    classes: *classes,
                    dim: *dim,
                    spread: *spread,
                    seed: seed.unwrap_or(self.seed),
                };
                (blobs.sample(*train, 0)?, blobs.sample(*test, 1)?)
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
                limit,
            } => {
                let mut train = load_idx(train_images, train_labels, *classes)?;
                if let Some(n) = limit.filter(|&n| n < train.len()) {
                    train = train.subset(&(0..n).collect::<Vec<_>>())?;
                }
                (train, load_idx(test_images, test_labels, *classes)?)
            }
        };
        let (val, test) = split_val(&test, self.val_fraction, self.seed)?;
        Ok(Splits { train, val, test })
    }
}
