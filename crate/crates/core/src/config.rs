//! Architecture configuration shared by every module and stored in the
//! header of saved weights.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Image sides must be multiples of this (1/8 features, then two more halvings).
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of the full-resolution stem.
    pub stem: usize,
    /// Widths of the three stride-2 stages.
    pub stages: [usize; 3],
    /// Channels of the emitted 1/8-resolution map.
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub levels: usize,
    /// Top-k per pyramid level, coarsest first.
    pub k_per_level: Vec<usize>,
    pub heads: usize,
    pub blocks: Vec<BlockKind>,
}

impl AttentionConfig {
    /// `n` blocks alternating self, cross, self, ...
    pub fn alternating(n: usize) -> Vec<BlockKind> {
        (0..n)
            .map(|i| if i % 2 == 0 { BlockKind::SelfAttention } else { BlockKind::CrossAttention })
            .collect()
    }

    /// k for pyramid level `level` (0 = finest).
    pub fn k_at(&self, level: usize) -> usize {
        self.k_per_level[self.levels - 1 - level]
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("attention needs at least one pyramid level".into()));
        }
        if self.k_per_level.len() != self.levels {
            return Err(Error::Config(format!(
                "k_per_level has {} entries for {} levels",
                self.k_per_level.len(),
                self.levels
            )));
        }
        if self.k_per_level.iter().any(|&k| k == 0) {
            return Err(Error::Config("every k must be at least 1".into()));
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {channels} channels", self.heads)));
        }
        Ok(())
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { levels: 3, k_per_level: vec![16, 8, 8], heads: 1, blocks: Self::alternating(8) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Correlation pyramid depth.
    pub corr_levels: usize,
    /// Lookup radius; each level contributes (2r+1)² samples.
    pub radius: usize,
    pub hidden: usize,
    pub context: usize,
    /// Motion-feature channels fed to the GRU, including the 2 raw flow channels.
    pub motion: usize,
    /// Refinement iterations at inference.
    pub iters: usize,
    /// Stop gradients through the running flow estimate between iterations.
    pub detach_flow: bool,
}

impl FlowConfig {
    pub fn lookup_channels(&self) -> usize {
        self.corr_levels * (2 * self.radius + 1).pow(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub flow: FlowConfig,
    /// Divide correlation inner products by √channels.
    pub scale_corr: bool,
}

impl ModelConfig {
    /// Small single-CPU preset used by training, tests, and the CLI defaults.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig { stem: 8, stages: [16, 24, 32], out_channels: 32 },
            attention: AttentionConfig::default(),
            flow: FlowConfig {
                corr_levels: 3,
                radius: 3,
                hidden: 32,
                context: 32,
                motion: 32,
                iters: 12,
                detach_flow: true,
            },
            scale_corr: false,
        }
    }

    /// Full-width preset. Kept for documentation; not expected to train on a CPU.
    pub fn paper_scale() -> Self {
        Self {
            encoder: EncoderConfig { stem: 64, stages: [64, 96, 128], out_channels: 256 },
            attention: AttentionConfig::default(),
            flow: FlowConfig {
                corr_levels: 4,
                radius: 4,
                hidden: 128,
                context: 128,
                motion: 128,
                iters: 12,
                detach_flow: true,
            },
            scale_corr: false,
        }
    }

    /// Tiny preset for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig { stem: 3, stages: [4, 4, 6], out_channels: 6 },
            attention: AttentionConfig { levels: 3, k_per_level: vec![2, 3, 4], heads: 1, blocks: AttentionConfig::alternating(2) },
            flow: FlowConfig {
                corr_levels: 2,
                radius: 1,
                hidden: 4,
                context: 4,
                motion: 6,
                iters: 2,
                detach_flow: false,
            },
            scale_corr: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate(self.channels())?;
        let f = &self.flow;
        if f.corr_levels == 0 || f.hidden == 0 || f.context == 0 || f.iters == 0 {
            return Err(Error::Config("flow config extents must be positive".into()));
        }
        if f.motion <= 2 {
            return Err(Error::Config("motion channels must exceed the 2 flow channels".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
