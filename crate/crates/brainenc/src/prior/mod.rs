//! Stage-2 causal transformer over discrete latent code grids: next-code
//! prediction with per-axis causal axial attention, cross-attention onto
//! the previous window's encoder features, named activation taps, and
//! autoregressive sampling.

mod model;
mod sample;

pub use model::{ForwardMode, PriorModel, TAP_SITES};
pub use sample::sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
}

impl PriorConfig {
    pub fn desk() -> PriorConfig {
        PriorConfig {
            hidden_dim: 48,
            heads: 2,
            layers: 4,
            dropout: 0.2,
            attn_dropout: 0.3,
        }
    }

    pub fn full_scale() -> PriorConfig {
        PriorConfig {
            hidden_dim: 576,
            heads: 4,
            layers: 8,
            dropout: 0.2,
            attn_dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.hidden_dim.is_multiple_of(3) || self.hidden_dim <= 3 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim must be a multiple of 3 and greater than 3, got {}",
                self.hidden_dim
            )));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.heads, self.hidden_dim
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::InvalidConfig("dropout rates must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Mid-stack tap used for feature extraction by default.
    pub fn default_tap(&self) -> String {
        format!("attn_stack.attn_nets.{}.post_fc_dp", self.layers / 2)
    }

    /// Deepest block's tap, the site used when sweeping depth.
    pub fn last_block_tap(&self) -> String {
        format!("attn_stack.attn_nets.{}.post_fc_dp", self.layers - 1)
    }
}
