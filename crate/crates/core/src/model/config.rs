use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of Wave modules chained in series.
    pub modules: usize,
    /// WaveMix blocks inside each Wave module.
    pub blocks_per_module: usize,
    /// Embedding dimension C.
    pub embed_dim: usize,
    /// Levels of Haar decomposition inside each WaveMix block (1..=3).
    pub dwt_level: usize,
    pub use_depthconv: bool,
    /// Hidden expansion of the WaveMix MLP.
    pub mlp_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { modules: 2, blocks_per_module: 4, embed_dim: 128, dwt_level: 1, use_depthconv: true, mlp_mult: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.modules == 0 {
            return bad("modules must be at least 1".into());
        }
        if self.blocks_per_module == 0 {
            return bad("blocks_per_module must be at least 1".into());
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim must be a positive multiple of 4, got {}", self.embed_dim));
        }
        if !(1..=3).contains(&self.dwt_level) {
            return bad(format!("dwt_level must be 1, 2 or 3, got {}", self.dwt_level));
        }
        if self.mlp_mult == 0 {
            return bad("mlp_mult must be at least 1".into());
        }
        Ok(())
    }

    /// Spatial dims of the network input must be multiples of this: one
    /// stride-2 convolution followed by `dwt_level` halvings.
    pub fn size_divisor(&self) -> usize {
        1 << (self.dwt_level + 1)
    }
}
