//! Conditional UNet denoiser with FiLM injection and reference-feature fusion.

mod block;
mod cond;
mod train;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use block::{film_apply, CondFeatures, FilmCoefs, FilmProjections, ResBlock, ResBlockCache};
pub use cond::{assemble_input, sinusoidal_encoding, window, ConditioningBundle, FrameInput, Mlp};
pub use train::{make_example, train_step, TrainExample};
pub use unet::{Denoiser, DenoiserOutput, Fusion, ReferenceFeatures, ReferenceNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    /// Channels per frame (1 for grayscale).
    pub frame_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Feature-map sizes at which reference fusion runs; empty means the two
    /// coarsest levels.
    pub attn_sizes: Vec<usize>,
    pub audio_window: usize,
    pub expr_window: usize,
    pub cond_embed_dim: usize,
    pub audio_dim: usize,
    pub expr_dim: usize,
    /// Kernel of the spatial gate convolution.
    pub spatial_kernel: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            frame_channels: 1,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            attn_sizes: Vec::new(),
            audio_window: 1,
            expr_window: 1,
            cond_embed_dim: 64,
            audio_dim: crate::synthworld::AUDIO_DIM,
            expr_dim: 50,
            spatial_kernel: 3,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn channels_in(&self) -> usize {
        4 * self.frame_channels
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    /// Encoder levels at which reference fusion runs.
    pub fn fusion_levels(&self) -> Vec<usize> {
        let n = self.levels();
        if self.attn_sizes.is_empty() {
            return (n.saturating_sub(2)..n).collect();
        }
        (0..n).filter(|&l| self.attn_sizes.contains(&self.level_size(l))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels();
        if n == 0 || self.channel_mults.contains(&0) {
            return Err(Error::config("denoiser.channel_mults must be non-empty and positive"));
        }
        if self.base_channels == 0 || self.frame_channels == 0 || self.cond_embed_dim == 0 {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if self.cond_embed_dim % 2 != 0 {
            return Err(Error::config("denoiser.cond_embed_dim must be even"));
        }
        let div = 1usize << (n - 1);
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::config(format!(
                "denoiser.image_size {} must be divisible by {div}",
                self.image_size
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::config("denoiser.spatial_kernel must be odd"));
        }
        for s in &self.attn_sizes {
            if !(0..n).any(|l| self.level_size(l) == *s) {
                return Err(Error::config(format!("denoiser.attn_sizes entry {s} is not a feature-map size")));
            }
        }
        Ok(())
    }
}
