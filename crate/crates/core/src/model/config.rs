use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

/// `ceil(8·d/3)` rounded up to an even number.
pub fn default_d_ff(d_model: usize) -> usize {
    let ff = (8 * d_model).div_ceil(3);
    ff + ff % 2
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64, 2, 4, VOCAB_SIZE, 128)
    }
}

impl ModelConfig {
    pub fn new(
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            d_model,
            d_ff: default_d_ff(d_model),
            n_layers,
            n_heads,
            vocab_size,
            max_seq_len,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!(
                "d_ff {} must be at least d_model {}",
                self.d_ff, self.d_model
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        if self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("n_layers and max_seq_len must be positive".into()));
        }
        Ok(())
    }
}
