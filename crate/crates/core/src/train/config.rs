use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Mka,
    Da,
}

/// How the two task genres are ordered inside an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixOrder {
    /// One uniform shuffle over all samples.
    #[default]
    Interleaved,
    /// Knowledge samples first, then alignment samples, each block shuffled.
    Blocked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub lambda_orth: f64,
    pub seed: u64,
    pub adapter: AdapterConfig,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Hard cap on optimizer steps; also the schedule length when set.
    pub max_steps: Option<usize>,
    /// Pretraining stops once held-out NLL drops below this value.
    pub nll_threshold: Option<f64>,
    /// Held-out evaluation period in steps (pretraining only).
    pub eval_every: usize,
    pub mix: MixOrder,
    /// Scan every tape value for NaN/Inf.
    pub checked: bool,
    pub data: Vec<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: StageKind::Mka,
            epochs: 1,
            batch_size: 32,
            peak_lr: 2e-4,
            warmup_ratio: 0.03,
            lambda_orth: 1.0,
            seed: 0,
            adapter: AdapterConfig::default(),
            clip_norm: None,
            max_steps: None,
            nll_threshold: None,
            eval_every: 100,
            mix: MixOrder::Interleaved,
            checked: true,
            data: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Stage defaults: one epoch for aggregation, three for alignment.
    pub fn for_stage(stage: StageKind) -> Self {
        let epochs = match stage {
            StageKind::Da => 3,
            _ => 1,
        };
        Self {
            stage,
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_orth.is_finite() && self.lambda_orth >= 0.0) {
            return Err(Error::Config(format!("lambda_orth must be >= 0, got {}", self.lambda_orth)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.adapter.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Optimizer steps for `n_samples` training samples.
    pub fn total_steps(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.batch_size);
        let full = per_epoch * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}
