//! The recurrent backbone: stacked residual blocks of time-mixing
//! (WKV recurrence) and channel-mixing, with O(1)-per-token streaming
//! state.

pub mod batch_graph;
pub mod infer;
pub mod params;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Byte-level vocabulary: 256 byte values plus three specials.
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    /// Rank of the synthesized weight deltas.
    pub rank: usize,
    /// Number of transforming-stack blocks in the synthesis module.
    pub stack_depth: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.d_model < 4 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be even and >= 4, got {}",
                self.d_model
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be >= 2".into()));
        }
        if self.ffn_mult < 1 {
            return Err(Error::Config("ffn_mult must be >= 1".into()));
        }
        if !(1..=3).contains(&self.rank) {
            return Err(Error::Config(format!(
                "rank must be 1, 2 or 3, got {}",
                self.rank
            )));
        }
        if self.stack_depth < 1 {
            return Err(Error::Config("stack_depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn tiny(vocab: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            vocab,
            ffn_mult: 4,
            rank: 1,
            stack_depth: 1,
        }
    }
}
