use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the miniature dual encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Patches per image side, `[rows, cols]`.
    pub patch_grid: [usize; 2],
    /// Input image size in pixels, `[height, width]`; must be divisible by the grid.
    pub image_size: [usize; 2],
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub temperature: f64,
    /// Hidden width of the feed-forward block, as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Seed of the (frozen) backbone initialization.
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 12,
            num_heads: 4,
            patch_grid: [4, 4],
            image_size: [16, 16],
            vocab_size: 256,
            max_text_len: 32,
            temperature: 0.01,
            mlp_ratio: 2,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("encoder.{name}");
        if self.embed_dim == 0 {
            return Err(Error::config(f("embed_dim"), "must be positive"));
        }
        if self.num_layers == 0 {
            return Err(Error::config(f("num_layers"), "must be positive"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                f("num_heads"),
                format!(
                    "must be positive and divide embed_dim ({})",
                    self.embed_dim
                ),
            ));
        }
        if self.patch_grid.contains(&0) {
            return Err(Error::config(f("patch_grid"), "must be positive"));
        }
        for (side, (&px, &grid)) in self.image_size.iter().zip(&self.patch_grid).enumerate() {
            if px == 0 || px % grid != 0 {
                return Err(Error::config(
                    f("image_size"),
                    format!("side {side} ({px}) is not a positive multiple of the patch grid ({grid})"),
                ));
            }
        }
        if self.vocab_size < crate::text::FIRST_WORD_ID as usize + 1 {
            return Err(Error::config(
                f("vocab_size"),
                "too small to hold the reserved tokens",
            ));
        }
        if self.max_text_len < 3 {
            return Err(Error::config(f("max_text_len"), "must be at least 3"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(f("temperature"), "must be a positive number"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(f("mlp_ratio"), "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid[0] * self.patch_grid[1]
    }

    pub fn patch_pixels(&self) -> usize {
        (self.image_size[0] / self.patch_grid[0]) * (self.image_size[1] / self.patch_grid[1])
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Which transformer layers receive anti-noise prompts (1-based, inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionSpec {
    pub layer_start: usize,
    pub layer_end: usize,
    /// Prompt tokens per layer; equals the learnable prompt count.
    pub prompt_count: usize,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        Self {
            layer_start: 6,
            layer_end: 12,
            prompt_count: 5,
        }
    }
}

impl InjectionSpec {
    pub fn new(layer_start: usize, layer_end: usize, prompt_count: usize) -> Self {
        Self {
            layer_start,
            layer_end,
            prompt_count,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.layer_start < 1 || self.layer_start > num_layers {
            return Err(Error::config(
                "injection.layer_start",
                format!("must lie in [1, {num_layers}], got {}", self.layer_start),
            ));
        }
        if self.layer_end < self.layer_start || self.layer_end > num_layers {
            return Err(Error::config(
                "injection.layer_end",
                format!(
                    "must lie in [{}, {num_layers}], got {}",
                    self.layer_start, self.layer_end
                ),
            ));
        }
        if self.prompt_count == 0 {
            return Err(Error::config("injection.prompt_count", "must be positive"));
        }
        Ok(())
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.layer_start..=self.layer_end
    }

    pub fn injects(&self, layer: usize) -> bool {
        self.layers().contains(&layer)
    }
}
