use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adapter hyperparameters shared by every slot of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Rank `r` of each routed expert and of each attention LoRA.
    pub rank: usize,
    pub alpha: f64,
    /// Number of shared experts `s`; the knowledge aggregator has rank `s·r`.
    pub shared_experts: usize,
    /// Number of routed experts `E`.
    pub experts: usize,
    pub top_k: usize,
    /// Renormalize the selected router weights to sum to one. Off by default: the selected
    /// softmax entries are used as-is.
    #[serde(default)]
    pub renormalize_topk: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            shared_experts: 2,
            experts: 8,
            top_k: 2,
            renormalize_topk: false,
        }
    }
}

impl AdapterConfig {
    /// Rank `r′ = s·r` of the knowledge aggregator and the alignment adapter.
    pub fn shared_rank(&self) -> usize {
        self.shared_experts * self.rank
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if self.shared_experts == 0 {
            return Err(Error::Config("shared_experts must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={} (experts), got {}",
                self.experts, self.top_k
            )));
        }
        Ok(())
    }
}
