use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of special tokens appended to each frame: one camera token and four
/// register tokens.
pub const SPECIAL_TOKENS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    /// Embedding width, a power of two.
    pub d: usize,
    /// Patch tokens per frame.
    pub s: usize,
    /// Frames per scene.
    pub f: usize,
    pub n_blocks: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `d`.
    pub mlp_ratio: usize,
    /// Multiplier on the special tokens' four designated channels.
    pub special_token_scale: f64,
    /// Output gain of the MLP units that feed the first designated channel
    /// back into itself, making special-token magnitudes grow with depth.
    pub amplifier_gain: f64,
    /// Constant offset the normalization layers add on the designated
    /// channels, with a random sign per channel.
    pub norm_bias: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            s: 16,
            f: 4,
            n_blocks: 8,
            heads: 4,
            mlp_ratio: 2,
            special_token_scale: 20.0,
            amplifier_gain: 1.0,
            norm_bias: 6.0,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn tokens_per_frame(&self) -> usize {
        self.s + SPECIAL_TOKENS
    }

    /// `n = (s + 5) · f`.
    pub fn tokens_per_scene(&self) -> usize {
        self.tokens_per_frame() * self.f
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d.is_power_of_two() {
            return Err(Error::UnsupportedDimension(self.d));
        }
        if !self.hidden().is_power_of_two() {
            return Err(Error::UnsupportedDimension(self.hidden()));
        }
        if self.s == 0 || self.f < 2 || self.n_blocks == 0 {
            return Err(Error::invalid("need s >= 1, f >= 2 and at least one block"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::invalid(format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if !(self.special_token_scale >= 1.0) || !self.amplifier_gain.is_finite() || !self.norm_bias.is_finite() {
            return Err(Error::invalid("special_token_scale must be >= 1"));
        }
        Ok(())
    }
}
