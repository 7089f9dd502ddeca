use serde::{Deserialize, Serialize};

use crate::dsp::MfccConfig;
use crate::error::{Error, Result};

/// Total spatial down-sampling of the backbone on both axes.
pub const BACKBONE_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// 3x3 convolution over all input channels.
    Standard,
    /// 3x3 depthwise convolution followed by a 1x1 pointwise convolution.
    DepthwiseSeparable,
}

/// One row of the block table. `out_channels` is the full-width (alpha = 1)
/// channel count; the width multiplier is applied on top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub width_multiplier: f64,
    pub blocks: Vec<BlockSpec>,
    pub input_channels: usize,
    /// Running-statistics momentum of every batch-norm layer.
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            width_multiplier: 0.25,
            blocks: mobilenet_v1_blocks(),
            input_channels: 3,
            bn_momentum: 0.9,
        }
    }
}

/// The MobileNet v1 table: a stride-2 stem and 13 depthwise-separable blocks.
pub fn mobilenet_v1_blocks() -> Vec<BlockSpec> {
    use BlockKind::*;
    let ds = |stride, out_channels| BlockSpec {
        kind: DepthwiseSeparable,
        stride,
        out_channels,
    };
    let mut blocks = vec![
        BlockSpec {
            kind: Standard,
            stride: 2,
            out_channels: 32,
        },
        ds(1, 64),
        ds(2, 128),
        ds(1, 128),
        ds(2, 256),
        ds(1, 256),
        ds(2, 512),
    ];
    blocks.extend(std::iter::repeat_n(ds(1, 512), 5));
    blocks.push(ds(2, 1024));
    blocks.push(ds(1, 1024));
    blocks
}

impl BackboneConfig {
    pub fn with_width(width_multiplier: f64) -> Self {
        BackboneConfig {
            width_multiplier,
            ..Default::default()
        }
    }

    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn final_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.input_channels, |b| self.channels(b.out_channels))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "width_multiplier {} must lie in (0, 1]",
                self.width_multiplier
            )));
        }
        if self.input_channels != 3 {
            return Err(Error::Config(format!(
                "input_channels must be 3 (replicated MFCC map), got {}",
                self.input_channels
            )));
        }
        if self.blocks.iter().any(|b| b.stride == 0 || b.out_channels == 0) {
            return Err(Error::Config("block strides and channels must be positive".into()));
        }
        let total: usize = self.blocks.iter().map(|b| b.stride).product();
        if total != BACKBONE_STRIDE {
            return Err(Error::Config(format!(
                "block strides multiply to {total}, expected {BACKBONE_STRIDE}"
            )));
        }
        let expected = (1024.0 * self.width_multiplier).round() as usize;
        if self.final_channels() != expected {
            return Err(Error::Config(format!(
                "final channel count {} differs from round(1024 * alpha) = {expected}",
                self.final_channels()
            )));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!("bn_momentum {} must lie in [0, 1)", self.bn_momentum)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model from audio: the JSON sidecar of a
/// weight file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mfcc: MfccConfig,
}

impl ModelConfig {
    pub fn with_width(width_multiplier: f64) -> Self {
        ModelConfig {
            backbone: BackboneConfig::with_width(width_multiplier),
            mfcc: MfccConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.mfcc.validate()
    }
}
