use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One strided layer of the waveform feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub conv_layers: Vec<ConvLayer>,
    pub conv_channels: usize,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Number of target classes.
    pub k: usize,
    /// Length of the learned positional table.
    pub max_frames: usize,
    pub sample_rate: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_layers: vec![
                ConvLayer { kernel: 10, stride: 5 },
                ConvLayer { kernel: 8, stride: 4 },
                ConvLayer { kernel: 4, stride: 4 },
                ConvLayer { kernel: 4, stride: 4 },
            ],
            conv_channels: 32,
            num_blocks: 2,
            model_dim: 64,
            num_heads: 2,
            ffn_dim: 128,
            k: 32,
            max_frames: 256,
            sample_rate: 16000,
        }
    }
}

impl EncoderConfig {
    /// Layer sizes of the full-scale model, for shape tests.
    pub fn full_scale() -> Self {
        Self {
            num_blocks: 12,
            model_dim: 768,
            num_heads: 8,
            ffn_dim: 3072,
            k: 500,
            conv_channels: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_layers.is_empty() || self.conv_layers.iter().any(|l| l.stride == 0 || l.kernel < l.stride) {
            return bad(format!("invalid conv layers {:?}", self.conv_layers));
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 || self.k < 2 || self.ffn_dim == 0 || self.conv_channels == 0 {
            return bad("num_blocks, ffn_dim, conv_channels must be positive and k >= 2".into());
        }
        Ok(())
    }

    /// Total stride of the conv stack.
    pub fn downsample(&self) -> usize {
        self.conv_layers.iter().map(|l| l.stride).product()
    }

    /// Samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.conv_layers {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    /// Output frames for an input of `samples`, or `None` when the input is
    /// shorter than the receptive field.
    pub fn frames(&self, samples: usize) -> Option<usize> {
        self.conv_layers
            .iter()
            .try_fold(samples, |len, l| (len >= l.kernel).then(|| (len - l.kernel) / l.stride + 1))
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Index of the middle block used for second-iteration targets.
    pub fn middle_layer(&self) -> usize {
        (self.num_blocks / 2).saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FusionVariant {
    Oa,
    Sf,
    Da,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    First,
    Last,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub placement: Placement,
}

impl FusionConfig {
    pub const fn new(variant: FusionVariant, placement: Placement) -> Self {
        Self { variant, placement }
    }

    /// Block indices after which fusion happens.
    pub fn sites(&self, num_blocks: usize) -> Vec<usize> {
        match self.placement {
            Placement::First => vec![0],
            Placement::Last => vec![num_blocks - 1],
            Placement::All => (0..num_blocks).collect(),
        }
    }

    /// Short label such as `OA_first`.
    pub fn label(&self) -> String {
        let v = match self.variant {
            FusionVariant::Oa => "OA",
            FusionVariant::Sf => "SF",
            FusionVariant::Da => "DA",
        };
        let p = match self.placement {
            Placement::First => "first",
            Placement::Last => "last",
            Placement::All => "all",
        };
        format!("{v}_{p}")
    }

    /// All nine variant × placement combinations.
    pub fn grid() -> Vec<FusionConfig> {
        let mut out = Vec::new();
        for v in [FusionVariant::Oa, FusionVariant::Sf, FusionVariant::Da] {
            for p in [Placement::First, Placement::Last, Placement::All] {
                out.push(FusionConfig::new(v, p));
            }
        }
        out
    }

    /// New parameters this configuration adds to a model of width `dim`.
    pub fn expected_params(&self, num_blocks: usize, dim: usize) -> usize {
        let per_site = match self.variant {
            FusionVariant::Oa => 1,
            FusionVariant::Sf => 2 * dim * dim + dim,
            FusionVariant::Da => 4 * dim * dim + 4 * dim,
        };
        self.sites(num_blocks).len() * per_site
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub span_length: usize,
    pub min_masks: usize,
    /// Weight of the unmasked-frame loss term.
    pub unmasked_weight: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.065,
            span_length: 10,
            min_masks: 1,
            unmasked_weight: 0.0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) || self.span_length == 0 || self.unmasked_weight < 0.0 {
            return Err(Error::Config(format!("invalid masking config {self:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_arithmetic() {
        let c = EncoderConfig::default();
        assert_eq!(c.downsample(), 320);
        assert_eq!(c.receptive_field(), 10 + 7 * 5 + 3 * 20 + 3 * 80);
        assert_eq!(c.frames(1600), Some(4));
        assert_eq!(c.frames(c.receptive_field()), Some(1));
        assert_eq!(c.frames(c.receptive_field() - 1), None);
    }

    #[test]
    fn placement_sites() {
        let oa = FusionConfig::new(FusionVariant::Oa, Placement::First);
        assert_eq!(oa.sites(2), vec![0]);
        assert_eq!(FusionConfig::new(FusionVariant::Oa, Placement::All).sites(2), vec![0, 1]);
        assert_eq!(FusionConfig::new(FusionVariant::Oa, Placement::Last).sites(3), vec![2]);
        assert_eq!(FusionConfig::grid().len(), 9);
    }

    #[test]
    fn full_scale_validates() {
        EncoderConfig::full_scale().validate().unwrap();
        let bad = EncoderConfig {
            num_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
