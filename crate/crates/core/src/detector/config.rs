use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the aligned detection module lines its features up with the
/// refined anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmVariant {
    /// Plain convolution; ignores the anchors.
    VanillaConv,
    /// Deformable convolution with offsets predicted from the features.
    LearnedDeform,
    /// Deformable convolution with offsets computed from the refined anchors.
    Roiconv,
}

impl AdmVariant {
    pub const ALL: [AdmVariant; 3] = [
        AdmVariant::VanillaConv,
        AdmVariant::LearnedDeform,
        AdmVariant::Roiconv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AdmVariant::VanillaConv => "vanilla_conv",
            AdmVariant::LearnedDeform => "learned_deform",
            AdmVariant::Roiconv => "roiconv",
        }
    }
}

impl fmt::Display for AdmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdmVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ADM variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub image_size: usize,
    pub stride: usize,
    pub anchor_scale: f64,
    pub anchor_ratio: f64,
    pub dpm_fg: f64,
    pub dpm_bg: f64,
    pub adm_fg: f64,
    pub adm_bg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub reg_loss_weight: f64,
    pub dpm_loss_weight: f64,
    pub adm_loss_weight: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub adm_kernel: usize,
    pub adm_variant: AdmVariant,
    /// Channels after each backbone stage.
    pub backbone_channels: [usize; 3],
    pub head_channels: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stride: 8,
            anchor_scale: 4.0,
            anchor_ratio: 1.0,
            dpm_fg: 0.4,
            dpm_bg: 0.3,
            adm_fg: 0.7,
            adm_bg: 0.7,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            reg_loss_weight: 1.0,
            dpm_loss_weight: 1.0,
            adm_loss_weight: 1.0,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
            adm_kernel: 3,
            adm_variant: AdmVariant::Roiconv,
            backbone_channels: [8, 16, 32],
            head_channels: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl DetectionConfig {
    /// Side of the feature map the heads run on.
    pub fn feature_size(&self) -> usize {
        self.image_size / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stride != 8 {
            return bad(format!(
                "the backbone downsamples by 8, got stride {}",
                self.stride
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.stride) {
            return bad(format!(
                "image size {} is not a positive multiple of {}",
                self.image_size, self.stride
            ));
        }
        for (name, fg, bg) in [
            ("dpm", self.dpm_fg, self.dpm_bg),
            ("adm", self.adm_fg, self.adm_bg),
        ] {
            if !(0.0..=1.0).contains(&bg) || !(bg..=1.0).contains(&fg) {
                return bad(format!(
                    "{name} thresholds need 0 <= bg <= fg <= 1, got fg {fg} bg {bg}"
                ));
            }
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad(format!(
                "focal alpha must be in (0, 1), got {}",
                self.focal_alpha
            ));
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!(
                "focal gamma must be >= 0, got {}",
                self.focal_gamma
            ));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad(format!(
                "smooth-L1 beta must be positive, got {}",
                self.smooth_l1_beta
            ));
        }
        if !(self.anchor_scale > 0.0 && self.anchor_ratio > 0.0) {
            return bad("anchor scale and ratio must be positive".into());
        }
        if self.adm_kernel == 0 || self.adm_kernel > 2 * self.feature_size() + 1 {
            return bad(format!(
                "ADM kernel {} does not fit the feature map",
                self.adm_kernel
            ));
        }
        if self.backbone_channels.contains(&0) || self.head_channels == 0 || self.batch_size == 0 {
            return bad("channel counts and batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("nms_iou and score_threshold must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("reg_loss_weight", self.reg_loss_weight),
            ("dpm_loss_weight", self.dpm_loss_weight),
            ("adm_loss_weight", self.adm_loss_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}
