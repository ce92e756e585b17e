use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy UNet.
///
/// The `[C, H, W]` input is folded by `patch`-space-to-depth onto a grid of
/// `H / patch` cells that is processed at `widths.len()` resolutions, halving
/// at each level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// `[H, W, C]`.
    pub latent_size: [usize; 3],
    pub patch: usize,
    /// Channel width per resolution, finest first.
    pub widths: Vec<usize>,
    pub token_dim: usize,
    pub num_text_tokens: usize,
    pub num_image_tokens: usize,
    pub heads: usize,
    /// Channels of the attention output stream.
    pub stream_channels: usize,
    pub pos_channels: usize,
    pub time_dim: usize,
    /// Side of the pooled grid the image-prompt encoder projects from.
    pub image_pool: usize,
    /// Prompts whose global offset is calibrated to zero, besides the empty one.
    pub anchor_prompts: Vec<String>,
    /// Scale of the global offset relative to the prior's spread.
    pub global_gain: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_size: [64, 64, 3],
            patch: 2,
            widths: vec![16, 24, 32],
            token_dim: 16,
            num_text_tokens: 6,
            num_image_tokens: 4,
            heads: 2,
            stream_channels: 8,
            pos_channels: 8,
            time_dim: 16,
            image_pool: 8,
            anchor_prompts: vec!["a photo of person".into()],
            global_gain: 1.0,
            seed: 0xd1ff_5a4b,
        }
    }
}

impl DenoiserConfig {
    /// A small network for finite-difference tests.
    pub fn tiny() -> Self {
        DenoiserConfig {
            latent_size: [8, 8, 2],
            patch: 2,
            widths: vec![3, 4, 5],
            token_dim: 4,
            num_text_tokens: 3,
            num_image_tokens: 2,
            heads: 2,
            stream_channels: 3,
            pos_channels: 4,
            time_dim: 4,
            image_pool: 2,
            anchor_prompts: Vec::new(),
            global_gain: 1.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.latent_size;
        let levels = self.widths.len();
        let all_positive = [h, w, c, self.patch, self.token_dim, self.num_text_tokens, self.num_image_tokens]
            .iter()
            .chain(&[self.heads, self.stream_channels, self.time_dim])
            .chain(&self.widths)
            .all(|&v| v > 0);
        if !all_positive || levels == 0 {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        let div = self.patch << (levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "latent {h}x{w} must be divisible by patch * 2^(levels-1) = {div}"
            )));
        }
        if h % self.image_pool.max(1) != 0 || w % self.image_pool.max(1) != 0 || self.image_pool == 0 {
            return Err(Error::config("image_pool must divide the latent size"));
        }
        if !self.global_gain.is_finite() {
            return Err(Error::config("global_gain must be finite"));
        }
        if self.pos_channels % 4 != 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("pos_channels must be a multiple of 4 and time_dim even"));
        }
        Ok(())
    }

    /// `[C, H, W]` tensor shape of latents.
    pub fn latent_shape(&self) -> [usize; 3] {
        let [h, w, c] = self.latent_size;
        [c, h, w]
    }

    /// Grid side (rows, cols) at `level`.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let [h, w, _] = self.latent_size;
        (h / self.patch >> level, w / self.patch >> level)
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Resolution level of each cross-attention site: down the encoder, then
    /// back up the decoder.
    pub fn attention_levels(&self) -> Vec<usize> {
        let n = self.levels();
        (0..n).chain((0..n - 1).rev()).collect()
    }

    /// Shape of the control residual expected at each level.
    pub fn residual_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels())
            .map(|l| {
                let (gh, gw) = self.grid(l);
                [self.widths[l], gh, gw]
            })
            .collect()
    }
}
