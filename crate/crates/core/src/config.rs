//! Run configuration: flat `key=value` files, canonical serialization and
//! the config hash that ties every artifact back to the settings that
//! produced it.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Later assignments override earlier ones, so command-line flags
//! are applied with [`RunConfig::set`] after the file has been read.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Variant};
use crate::msfl::MsflSpec;
use crate::training::{LossWeights, TrainConfig};

/// Training sets smaller than this use [`SMALL_BATCH`] when no batch size is set.
pub const SMALL_DATASET: usize = 100;
pub const SMALL_BATCH: usize = 16;
pub const DEFAULT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Directory holding `<Name>_TRAIN.*` / `<Name>_TEST.*`.
    pub dataset: PathBuf,
    pub missing_ratio: f64,
    pub mask_seed: u64,
    pub seed: u64,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub scales: usize,
    pub branch_channels: usize,
    pub dilation: usize,
    pub final_dilation: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    /// `None` selects 64, or 16 for training sets under 100 samples.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub normalize: bool,
    pub zero_fill: bool,
    pub linear_head: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            missing_ratio: 0.2,
            mask_seed: 0,
            seed: 0,
            hidden_size: 128,
            num_layers: 2,
            scales: 6,
            branch_channels: 32,
            dilation: 2,
            final_dilation: 1,
            alpha: 1.0,
            beta: 1.0,
            learning_rate: 3e-4,
            batch_size: None,
            epochs: 100,
            normalize: true,
            zero_fill: false,
            linear_head: false,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Keys in canonical order. `output_dir` is last and excluded from the hash.
pub const KEYS: [&str; 19] = [
    "dataset",
    "missing_ratio",
    "mask_seed",
    "seed",
    "hidden_size",
    "num_layers",
    "scales",
    "branch_channels",
    "dilation",
    "final_dilation",
    "alpha",
    "beta",
    "learning_rate",
    "batch_size",
    "epochs",
    "normalize",
    "zero_fill",
    "linear_head",
    "output_dir",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Assigns one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "missing_ratio" => self.missing_ratio = parse_value(key, v)?,
            "mask_seed" => self.mask_seed = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "hidden_size" => self.hidden_size = parse_value(key, v)?,
            "num_layers" => self.num_layers = parse_value(key, v)?,
            "scales" => self.scales = parse_value(key, v)?,
            "branch_channels" => self.branch_channels = parse_value(key, v)?,
            "dilation" => self.dilation = parse_value(key, v)?,
            "final_dilation" => self.final_dilation = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => {
                self.batch_size = if v.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(parse_value(key, v)?)
                }
            }
            "epochs" => self.epochs = parse_value(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "zero_fill" => self.zero_fill = parse_bool(key, v)?,
            "linear_head" => self.linear_head = parse_bool(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.display().to_string(),
            "missing_ratio" => self.missing_ratio.to_string(),
            "mask_seed" => self.mask_seed.to_string(),
            "seed" => self.seed.to_string(),
            "hidden_size" => self.hidden_size.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "scales" => self.scales.to_string(),
            "branch_channels" => self.branch_channels.to_string(),
            "dilation" => self.dilation.to_string(),
            "final_dilation" => self.final_dilation.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.map_or("auto".into(), |b| b.to_string()),
            "epochs" => self.epochs.to_string(),
            "normalize" => self.normalize.to_string(),
            "zero_fill" => self.zero_fill.to_string(),
            "linear_head" => self.linear_head.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => unreachable!("KEYS lists every field"),
        }
    }

    /// Canonical `key=value` lines in [`KEYS`] order; parses back to `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.value_of(k))).collect()
    }

    /// Canonical pairs, in order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.to_string(), self.value_of(k))).collect()
    }

    /// SHA-256 of the canonical lines, excluding `output_dir`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| **k != "output_dir") {
            h.update(format!("{k}={}\n", self.value_of(k)));
        }
        hex::encode(h.finalize())
    }

    pub fn variant(&self) -> Variant {
        match (self.zero_fill, self.linear_head) {
            (true, _) => Variant::ZeroFill,
            (false, true) => Variant::LinearHead,
            _ => Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::data::mask::validate_ratio(self.missing_ratio)?;
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("scales", self.scales),
            ("branch_channels", self.branch_channels),
            ("dilation", self.dilation),
            ("final_dilation", self.final_dilation),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.zero_fill && self.linear_head {
            return Err(Error::Config("zero_fill and linear_head are mutually exclusive".into()));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn effective_batch_size(&self, num_train: usize) -> usize {
        self.batch_size.unwrap_or(if num_train < SMALL_DATASET {
            SMALL_BATCH
        } else {
            DEFAULT_BATCH
        })
    }

    pub fn model_spec(&self, input_dims: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            input_dims,
            hidden_size: self.hidden_size,
            num_classes,
            msfl: MsflSpec {
                num_layers: self.num_layers,
                scales_per_layer: self.scales,
                dilation: self.dilation,
                final_dilation: self.final_dilation,
                branch_channels: self.branch_channels,
                num_classes,
                input_channels: input_dims,
            },
            variant: self.variant(),
        }
    }

    pub fn train_config(&self, num_train: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.effective_batch_size(num_train),
            learning_rate: self.learning_rate,
            weights: self.loss_weights(),
            seed: self.seed,
        }
    }
}
