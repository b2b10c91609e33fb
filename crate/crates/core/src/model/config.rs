use serde::{Deserialize, Serialize};

use crate::data::synth::ImageSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub image: ImageSpec,
    /// Width of the visual encoder's per-patch features.
    pub visual_dim: usize,
    pub adapter_hidden: usize,
    pub mlp_hidden: usize,
    /// Std of the truncated-normal weight init.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            model_dim: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 128,
            image: ImageSpec::default(),
            visual_dim: 64,
            adapter_hidden: 128,
            mlp_hidden: 256,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must cover the reserved tokens".into());
        }
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("max_seq_len", self.max_seq_len),
            ("visual_dim", self.visual_dim),
            ("adapter_hidden", self.adapter_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("image.grid_rows", self.image.grid_rows),
            ("image.grid_cols", self.image.grid_cols),
            ("image.patch_size", self.image.patch_size),
            ("image.channels", self.image.channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.image.num_patches() + 1 > self.max_seq_len {
            return bad("max_seq_len cannot hold BOS plus every patch".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.image.num_patches()
    }
}
