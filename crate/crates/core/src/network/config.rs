use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

/// Which local attention the bottleneck blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Regional,
    /// Non-overlapping `region_size` windows; odd blocks shift by half a window.
    Window,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckAttention {
    pub kind: AttentionKind,
    pub region_size: usize,
    pub dilation: usize,
    pub num_heads: usize,
}

impl Default for BottleneckAttention {
    fn default() -> Self {
        Self { kind: AttentionKind::Regional, region_size: 11, dilation: 2, num_heads: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of encoder (and decoder) stages.
    pub depth: usize,
    pub base_channels: usize,
    /// `depth + 1` width multipliers; the last one is the bottleneck.
    pub channel_multipliers: Vec<usize>,
    pub ca_blocks_per_module: usize,
    pub ram_blocks: usize,
    pub mlp_ratio: usize,
    pub ca_reduction: usize,
    pub attention: BottleneckAttention,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 8],
            ca_blocks_per_module: 2,
            ram_blocks: 4,
            mlp_ratio: 4,
            ca_reduction: 4,
            attention: BottleneckAttention::default(),
        }
    }
}

impl ModelConfig {
    /// Channel width of stage `l` (`l == depth` is the bottleneck).
    pub fn width(&self, l: usize) -> usize {
        self.base_channels * self.channel_multipliers[l]
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            region_size: self.attention.region_size,
            dilation: self.attention.dilation,
            num_heads: self.attention.num_heads,
            embed_dim: self.width(self.depth),
        }
    }

    /// Structural checks that do not depend on the input size.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth and base_channels must be positive".into()));
        }
        if self.channel_multipliers.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "channel_multipliers needs {} entries for depth {}, got {}",
                self.depth + 1,
                self.depth,
                self.channel_multipliers.len()
            )));
        }
        if self.channel_multipliers[0] == 0 || self.channel_multipliers.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("channel_multipliers must be positive and nondecreasing".into()));
        }
        if self.mlp_ratio == 0 || self.ca_reduction == 0 {
            return Err(Error::Config("mlp_ratio and ca_reduction must be positive".into()));
        }
        for l in 0..=self.depth {
            if self.width(l) % self.ca_reduction != 0 {
                return Err(Error::Config(format!(
                    "ca_reduction {} does not divide stage width {}",
                    self.ca_reduction,
                    self.width(l)
                )));
            }
        }
        self.attention_config().validate()
    }

    /// Smallest factor the input height and width must be multiples of.
    pub fn size_factor(&self) -> usize {
        1 << self.depth
    }

    /// Checks that an `height x width` input fits the network.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let f = self.size_factor();
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::Config(format!(
                "input {height}x{width} must have sides divisible by {f} (2^depth)"
            )));
        }
        let (bh, bw) = (height / f, width / f);
        match self.attention.kind {
            AttentionKind::Regional => self.attention_config().check_fits(bh, bw),
            AttentionKind::Window => {
                let win = self.attention.region_size;
                if bh % win != 0 || bw % win != 0 {
                    return Err(Error::Config(format!(
                        "window {win} does not tile the {bh}x{bw} bottleneck"
                    )));
                }
                Ok(())
            }
        }
    }
}
