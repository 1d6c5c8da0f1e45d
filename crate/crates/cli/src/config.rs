//! Run configuration: a TOML file whose every field has a default, plus
//! `--set section.key=value` overrides applied before parsing.

use std::path::{Path, PathBuf};

use denseshift::data::{default_data_dir, load_cifar10, load_mnist, synthetic_blobs, transfer_split, Dataset};
use denseshift::freeze::SnapshotSource;
use denseshift::nn::presets::{by_name, lenet, mlp, small_cnn, PresetOptions, WeightChoice};
use denseshift::nn::{NetworkSpec, TrainConfig};
use denseshift::reparam::{LatentInit, SteOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub init: LatentInit,
    pub ste: SteOptions,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            init: LatentInit::default(),
            ste: SteOptions::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `lenet`, `small_cnn` or `mlp`; ignored when `layers` is given.
    pub preset: String,
    /// Channel width of `small_cnn`, hidden units of `mlp`.
    pub width: usize,
    pub weights: WeightChoice,
    pub bits: u8,
    /// Quantize the final classifier layer as well.
    pub quantize_classifier: bool,
    /// Quantize the first convolution too.
    pub quantize_first: bool,
    /// Explicit layer list replacing the preset.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<denseshift::nn::LayerSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let opts = PresetOptions::default();
        Self {
            preset: "lenet".into(),
            width: 16,
            weights: opts.weights,
            bits: opts.bits,
            quantize_classifier: opts.quantize_classifier,
            quantize_first: opts.quantize_first,
            layers: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn options(&self) -> PresetOptions {
        PresetOptions {
            weights: self.weights,
            bits: self.bits,
            quantize_classifier: self.quantize_classifier,
            quantize_first: self.quantize_first,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding `mnist/` and `cifar-10-batches-bin/`.
    pub dir: PathBuf,
    /// Keep only these classes, relabelled `0..k` in listed order. Empty keeps all.
    pub classes: Vec<usize>,
    /// First `n` training samples of each class; 0 keeps all.
    pub train_per_class: usize,
    /// First `n` test samples of each class; 0 keeps all.
    pub test_per_class: usize,
    pub blobs: BlobsConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            dir: default_data_dir(),
            classes: Vec::new(),
            train_per_class: 0,
            test_per_class: 0,
            blobs: BlobsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 8,
            train_per_class: 200,
            test_per_class: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Tensor compared by the per-epoch filter cosine.
    pub snapshot_source: SnapshotSource,
    /// Latent elements traced per quantized layer (spread evenly).
    pub trace_samples: usize,
    /// Optimizer steps between trace records; 0 disables tracing.
    pub trace_every: u64,
    /// Evaluate test accuracy after every epoch instead of only at the end.
    pub eval_every_epoch: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            snapshot_source: SnapshotSource::Effective,
            trace_samples: 16,
            trace_every: 1,
            eval_every_epoch: false,
        }
    }
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn load(&self) -> CliResult<Splits> {
        let (train, test) = match self.dataset {
            DatasetKind::Mnist => load_mnist(&self.dir.join("mnist"))?,
            DatasetKind::Cifar10 => load_cifar10(&self.dir.join("cifar-10-batches-bin"))?,
            DatasetKind::Blobs => {
                let b = &self.blobs;
                let train = synthetic_blobs(b.classes, b.dim, b.train_per_class, b.seed)?;
                let test = synthetic_blobs(b.classes, b.dim, b.test_per_class, b.seed.wrapping_add(1))?;
                (train, test)
            }
        };
        let (train, test) = if self.classes.is_empty() {
            (train, test)
        } else {
            let rest: Vec<usize> = (0..train.classes()).filter(|c| !self.classes.contains(c)).collect();
            let pick = |d: &Dataset| -> CliResult<Dataset> {
                if rest.is_empty() {
                    return Ok(d.clone());
                }
                Ok(transfer_split(d, &self.classes, &rest)?.0)
            };
            (pick(&train)?, pick(&test)?)
        };
        let limit = |d: Dataset, n: usize| -> CliResult<Dataset> {
            Ok(if n == 0 { d } else { d.take_per_class(n)? })
        };
        let train = limit(train, self.train_per_class)?;
        let test = limit(test, self.test_per_class)?;
        if train.is_empty() || test.is_empty() {
            return Err(CliError::Data("selected dataset split is empty".into()));
        }
        Ok(Splits { train, test })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from the defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if let LatentInit::LowVariance { sigma } = self.init {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(CliError::Config(format!("init sigma must be > 0, got {sigma}")));
            }
        }
        self.network_spec(self.classes())?.validate()?;
        Ok(())
    }

    /// Number of classes the model is built for.
    pub fn classes(&self) -> usize {
        if !self.data.classes.is_empty() {
            self.data.classes.len()
        } else {
            match self.data.dataset {
                DatasetKind::Mnist | DatasetKind::Cifar10 => 10,
                DatasetKind::Blobs => self.data.blobs.classes,
            }
        }
    }

    pub fn network_spec(&self, classes: usize) -> CliResult<NetworkSpec> {
        let m = &self.model;
        if !m.layers.is_empty() {
            let input = match self.data.dataset {
                DatasetKind::Mnist => vec![1, 28, 28],
                DatasetKind::Cifar10 => vec![3, 32, 32],
                DatasetKind::Blobs => vec![self.data.blobs.dim],
            };
            return Ok(NetworkSpec {
                input,
                classes,
                layers: m.layers.clone(),
            });
        }
        let spec = match m.preset.as_str() {
            "lenet" => lenet(m.options(), classes),
            "small_cnn" => small_cnn(m.options(), classes, m.width),
            "mlp" => {
                let features = match self.data.dataset {
                    DatasetKind::Mnist => 28 * 28,
                    DatasetKind::Cifar10 => 3 * 32 * 32,
                    DatasetKind::Blobs => self.data.blobs.dim,
                };
                mlp(m.options(), features, m.width, classes)
            }
            other => by_name(other, m.options(), classes)?,
        };
        let expected: &[usize] = match self.data.dataset {
            DatasetKind::Mnist => &[1, 28, 28],
            DatasetKind::Cifar10 => &[3, 32, 32],
            DatasetKind::Blobs => &spec.input,
        };
        if spec.input != expected && m.preset != "mlp" {
            return Err(CliError::Config(format!(
                "preset {} takes {:?} inputs, dataset {:?} provides {expected:?}",
                m.preset, spec.input, self.data.dataset
            )));
        }
        Ok(spec)
    }
}

/// `a.b.c=value`; the value is read as a TOML value, falling back to a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
