use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vision Transformer encoder/decoder geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub drop_path_rate: f32,
    /// 1-based encoder block indices whose outputs are summed to form the
    /// encoder output. `None` uses the last block only.
    pub hierarchical_layers: Option<Vec<usize>>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_chans: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            decoder_depth: 2,
            decoder_dim: 64,
            decoder_heads: 4,
            drop_path_rate: 0.1,
            hierarchical_layers: None,
        }
    }
}

impl ViTConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_chans
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        for (what, dim, heads) in [
            ("embed_dim", self.embed_dim, self.num_heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return Err(Error::config(format!(
                    "{what} {dim} is not divisible by {heads} heads"
                )));
            }
            // sine-cosine position tables split the width four ways
            if dim % 4 != 0 {
                return Err(Error::config(format!("{what} {dim} must be a multiple of 4")));
            }
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("depth and mlp_ratio must be positive"));
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(format!(
                "drop_path_rate {} outside [0, 1]",
                self.drop_path_rate
            )));
        }
        if let Some(layers) = &self.hierarchical_layers {
            if layers.is_empty() || layers.iter().any(|&l| l == 0 || l > self.depth) {
                return Err(Error::config(format!(
                    "hierarchical_layers {layers:?} must be 1-based block indices <= depth {}",
                    self.depth
                )));
            }
            if !layers.contains(&self.depth) {
                return Err(Error::config(format!(
                    "hierarchical_layers {layers:?} must include the last block {}",
                    self.depth
                )));
            }
            let mut sorted = layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != layers.len() {
                return Err(Error::config("hierarchical_layers has duplicates"));
            }
        }
        Ok(())
    }
}

/// Projection head: shared trunk, then separate class/patch output layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionHeadConfig {
    pub num_shared_layers: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Output layers use unit-norm weight columns and no bias, so scores
    /// are cosines between the feature and each prototype.
    pub norm_last_layer: bool,
}

impl Default for ProjectionHeadConfig {
    fn default() -> Self {
        Self {
            num_shared_layers: 2,
            hidden_dim: 2048,
            output_dim: 4096,
            norm_last_layer: true,
        }
    }
}

impl ProjectionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_shared_layers == 0 || self.hidden_dim == 0 || self.output_dim < 2 {
            return Err(Error::config(format!("invalid projection head {self:?}")));
        }
        Ok(())
    }
}
