//! Architecture and schedule settings of the learned model.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Width of the first extractor stage (1/2 resolution).
    pub stem_channels: usize,
    /// Matching features at 1/4 resolution.
    pub fine_channels: usize,
    /// Matching features at 1/8 resolution.
    pub coarse_channels: usize,
    /// Context output per level; the first half seeds the update state.
    pub context_channels: usize,
    pub instance_norm: bool,
    /// Samples per pyramid level along the epipolar line (odd).
    pub samples: usize,
    /// Depth of the lookup pyramid.
    pub pyramid_levels: usize,
    /// Per-view disparity hidden state width.
    pub hidden_channels: usize,
    /// Per-view disparity feature width; the pose embedding is projected to
    /// the same width.
    pub disparity_channels: usize,
    /// Sinusoidal bands per axis of the 2-D positional encoding.
    pub posenc_bands: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub coarse_iters: usize,
    pub fine_iters: usize,
    pub use_pose_embedding: bool,
    pub use_uncertainty_hidden: bool,
    /// Square the translation norm inside the pose distance.
    pub squared_translation: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            fine_channels: 32,
            coarse_channels: 64,
            context_channels: 96,
            instance_norm: true,
            samples: 9,
            pyramid_levels: 4,
            hidden_channels: 16,
            disparity_channels: 32,
            posenc_bands: 4,
            attention_dim: 64,
            heads: 4,
            blocks: 2,
            coarse_iters: 8,
            fine_iters: 2,
            use_pose_embedding: true,
            use_uncertainty_hidden: true,
            squared_translation: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            stem_channels: 8,
            fine_channels: 16,
            coarse_channels: 24,
            context_channels: 32,
            hidden_channels: 8,
            disparity_channels: 16,
            posenc_bands: 2,
            attention_dim: 32,
            ..Self::default()
        }
    }

    /// Tiny widths for gradient checks.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 3,
            fine_channels: 4,
            coarse_channels: 4,
            context_channels: 4,
            samples: 3,
            pyramid_levels: 2,
            hidden_channels: 2,
            disparity_channels: 4,
            posenc_bands: 1,
            attention_dim: 8,
            heads: 2,
            blocks: 1,
            coarse_iters: 1,
            fine_iters: 1,
            ..Self::default()
        }
    }

    pub fn gru_channels(&self) -> usize {
        self.context_channels / 2
    }

    pub fn cost_channels(&self) -> usize {
        self.samples * self.pyramid_levels
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.stem_channels,
            self.fine_channels,
            self.coarse_channels,
            self.hidden_channels,
            self.disparity_channels,
            self.attention_dim,
            self.heads,
            self.blocks,
        ];
        if widths.contains(&0) {
            return Err(invalid("model widths must be positive"));
        }
        if self.samples % 2 == 0 {
            return Err(invalid("samples per level must be odd"));
        }
        if self.pyramid_levels == 0 {
            return Err(invalid("pyramid needs at least one level"));
        }
        if self.context_channels < 2 || self.context_channels % 2 != 0 {
            return Err(invalid("context channels must be even and at least 2"));
        }
        if self.attention_dim % self.heads != 0 {
            return Err(invalid("attention width must be divisible by the head count"));
        }
        if self.coarse_iters == 0 {
            return Err(invalid("at least one coarse iteration is required"));
        }
        Ok(())
    }
}
