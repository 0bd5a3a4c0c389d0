use std::fmt;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segmentation head architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SegHead {
    /// Convolution block followed by x8 upsampling.
    Simple,
    /// Skip connection from stage-1 backbone features.
    #[value(name = "encdec", alias = "encoder_decoder")]
    EncoderDecoder,
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Flat 5-way cross-entropy over {background, 4 damage classes}.
    Ce,
    /// Localization-aware loss (BCE + foreground-only damage CE).
    Locaware,
    /// Localization-aware loss plus Dice on the building masks.
    #[value(name = "locaware-dice", alias = "locaware_dice")]
    LocawareDice,
}

/// How segmentation-head and change-head damage predictions combine at
/// inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[value(name = "change_only", alias = "change-only")]
    ChangeOnly,
    #[value(name = "seg_only", alias = "seg-only")]
    SegOnly,
    #[default]
    #[value(name = "mean_logprob", alias = "mean-logprob")]
    MeanLogprob,
}

macro_rules! display_via_value_enum {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = self.to_possible_value().expect("no skipped variants");
                f.write_str(v.get_name())
            }
        }
    )*};
}

display_via_value_enum!(SegHead, LossMode, Fusion);

/// Architecture and objective of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Residual blocks in each of the four backbone stages.
    pub blocks_per_stage: Vec<usize>,
    /// Nominal ASPP dilation rates, divided by `aspp_divisor` at build time.
    pub aspp_dilations: Vec<usize>,
    pub aspp_divisor: usize,
    pub seg_head: SegHead,
    pub change_head_enabled: bool,
    pub num_damage_classes: usize,
    pub loss_mode: LossMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 8,
            blocks_per_stage: vec![1, 1, 1, 1],
            aspp_dilations: vec![12, 24, 36],
            aspp_divisor: 4,
            seg_head: SegHead::EncoderDecoder,
            change_head_enabled: true,
            num_damage_classes: 4,
            loss_mode: LossMode::LocawareDice,
        }
    }
}

/// Output stride of the backbone.
pub const OUTPUT_STRIDE: usize = 8;

/// Stride and dilation of the four backbone stages. Stage 2 halves the
/// resolution to reach stride 8; later stages dilate instead of striding.
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 1, 1];
pub const STAGE_DILATIONS: [usize; 4] = [1, 1, 2, 4];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.blocks_per_stage.len() != 4 || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(format!(
                "blocks_per_stage must list 4 positive counts, got {:?}",
                self.blocks_per_stage
            )));
        }
        if self.num_damage_classes != 4 {
            return Err(Error::Config(format!(
                "the label format has 4 damage classes, got num_damage_classes={}",
                self.num_damage_classes
            )));
        }
        if self.aspp_divisor == 0 {
            return Err(Error::Config("aspp_divisor must be positive".into()));
        }
        let d = self.effective_dilations();
        if d.is_empty() {
            return Err(Error::Config("aspp_dilations must not be empty".into()));
        }
        if d.contains(&0) || d.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ASPP dilations {:?} / {} = {:?} must be positive and strictly increasing",
                self.aspp_dilations, self.aspp_divisor, d
            )));
        }
        Ok(())
    }

    /// ASPP dilations after dividing by the divisor.
    pub fn effective_dilations(&self) -> Vec<usize> {
        self.aspp_dilations
            .iter()
            .map(|d| d / self.aspp_divisor.max(1))
            .collect()
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 4 * b]
    }

    pub fn aspp_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn head_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn low_level_channels(&self) -> usize {
        self.base_channels
    }

    pub fn change_channels(&self) -> usize {
        2 * self.base_channels
    }

    /// Whether parameters under `path` are updated by the configured loss.
    /// The change head receives no gradient from plain cross-entropy.
    pub fn is_trained(&self, path: &str) -> bool {
        !(self.loss_mode == LossMode::Ce && path.starts_with("change_head."))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
