use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Feature width `C`.
    pub dim: usize,
    pub heads: usize,
    /// Number of editing layers `L`.
    pub layers: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub instruction_image_height: usize,
    pub instruction_image_width: usize,
    pub encoder_blocks: usize,
    pub fusion_blocks: usize,
    pub instruction_encoder_frozen: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            patch_size: 8,
            channels: 3,
            dim: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 4,
            vocab_size: 4096,
            max_text_len: 64,
            instruction_image_height: 32,
            instruction_image_width: 16,
            encoder_blocks: 2,
            fusion_blocks: 2,
            instruction_encoder_frozen: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        let p = self.patch_size;
        if p == 0 || self.channels == 0 || self.dim == 0 || self.heads == 0 {
            return bad("patch_size, channels, dim and heads must be positive".into());
        }
        if self.image_height % p != 0 || self.image_width % p != 0 {
            return bad(format!(
                "image {}x{} is not divisible by patch {p}",
                self.image_height, self.image_width
            ));
        }
        if self.instruction_image_height % p != 0 || self.instruction_image_width % p != 0 {
            return bad(format!(
                "instruction image {}x{} is not divisible by patch {p}",
                self.instruction_image_height, self.instruction_image_width
            ));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.instruction_image_height == 0 || self.instruction_image_width == 0 {
            return bad("instruction image dimensions must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.layers == 0 {
            return bad("at least one editing layer is required".into());
        }
        if self.fusion_blocks == 0 || self.mlp_ratio == 0 {
            return bad("fusion_blocks and mlp_ratio must be positive".into());
        }
        if self.vocab_size == 0 || self.max_text_len == 0 {
            return bad("vocab_size and max_text_len must be positive".into());
        }
        Ok(())
    }

    /// Patch count `N` of a query image.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Query sequence length `N + 1`.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn instruction_patches(&self) -> usize {
        (self.instruction_image_height / self.patch_size)
            * (self.instruction_image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// A tiny configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            image_height: 8,
            image_width: 4,
            patch_size: 4,
            channels: 1,
            dim: 4,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            vocab_size: 64,
            max_text_len: 8,
            instruction_image_height: 4,
            instruction_image_width: 4,
            encoder_blocks: 1,
            fusion_blocks: 1,
            instruction_encoder_frozen: false,
        }
    }
}
