use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::LrSchedule;
use crate::datagen::DataConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub precision: Precision,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 4e-4,
            lr_schedule: LrSchedule::OneCycle,
            clip_norm: 1.0,
            weight_decay: 1e-5,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            train_pairs: 20,
            holdout_pairs: 0,
            precision: Precision::F32,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.train_pairs == 0 {
            return bad("train_pairs must be positive");
        }
        if self.model.iterations == 0 {
            return bad("model.iterations must be positive for training");
        }
        if !self.data.height.is_multiple_of(8) || !self.data.width.is_multiple_of(8) {
            return bad("data extents must be multiples of 8");
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.data.validate()
    }

    /// Parse TOML, rejecting unknown fields with their location.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// The effective configuration with every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML framed as a git blob.
    pub fn hash(&self) -> String {
        content_hash(self.to_toml().as_bytes())
    }
}

/// Git-style object hash: `sha256("blob <len>\0" || bytes)` in hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
