//! Feature/anchor alignment analysis: implicit RoI sizes, the IoU between
//! implicit RoIs and anchors, and alignment histograms per operator arm.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{alignment_histogram, decode_offsets_to_roi, iou, BBox, BoxMap, Histogram};
use crate::conv::{implicit_roi, roiconv_offsets, Kernel};
use crate::detector::{forward, load_checkpoint, make_dataset, AdmVariant};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Anchor side in units of the stride, as in `scale · S`.
    pub anchor_scales: Vec<f64>,
    /// Row extent over column extent.
    pub anchor_ratios: Vec<f64>,
    pub arms: Vec<AdmVariant>,
    /// Trained detector whose refined anchors (and learned offsets) are
    /// analysed. Without it, random anchors stand in for refined ones.
    pub checkpoint: Option<PathBuf>,
    pub scenes: usize,
    pub bin_width: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            strides: vec![8, 16, 32, 64, 128],
            kernels: vec![3],
            anchor_scales: vec![4.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            arms: vec![AdmVariant::VanillaConv, AdmVariant::Roiconv],
            checkpoint: None,
            scenes: 20,
            bin_width: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImplicitRoiSize {
    pub stride: usize,
    pub kernel: usize,
    pub extent_x: f64,
    pub extent_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MisalignmentRow {
    pub stride: usize,
    pub kernel: usize,
    pub anchor_scale: f64,
    pub anchor_ratio: f64,
    pub anchor_extent_x: f64,
    pub anchor_extent_y: f64,
    /// IoU between the anchor and the implicit RoI at the same location.
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmHistogram {
    pub arm: AdmVariant,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub config: AnalyzeConfig,
    pub implicit_rois: Vec<ImplicitRoiSize>,
    pub misalignment: Vec<MisalignmentRow>,
    /// Where the anchors of the histograms came from.
    pub anchor_source: String,
    pub histograms: Vec<ArmHistogram>,
}

impl AnalyzeReport {
    pub fn implicit_roi_csv(&self) -> String {
        let mut out = String::from("stride,kernel,extent_x,extent_y\n");
        for r in &self.implicit_rois {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.stride, r.kernel, r.extent_x, r.extent_y
            ));
        }
        out
    }

    pub fn misalignment_csv(&self) -> String {
        let mut out = String::from(
            "stride,kernel,anchor_scale,anchor_ratio,anchor_extent_x,anchor_extent_y,iou\n",
        );
        for r in &self.misalignment {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.stride,
                r.kernel,
                r.anchor_scale,
                r.anchor_ratio,
                r.anchor_extent_x,
                r.anchor_extent_y,
                r.iou
            ));
        }
        out
    }
}

/// Side lengths of the implicit RoI of a `k × k` convolution at stride `S`.
pub fn implicit_roi_size(stride: usize, kernel: usize) -> (f64, f64) {
    let r = implicit_roi(0, 0, Kernel::square(kernel), stride);
    (r.extent_x(), r.extent_y())
}

/// One location's anchors and, for a learned-offset model, its offsets.
struct AnchorSet {
    source: String,
    kernel: Kernel,
    stride: usize,
    maps: Vec<BoxMap>,
    learned: Option<Vec<Vec<Vec<f64>>>>,
}

fn random_anchors(seed: u64, scenes: usize, kernel: Kernel) -> Result<AnchorSet> {
    let (n, stride) = (8usize, 8usize);
    let mut rng = Rng::derive(seed, 0xa11);
    let maps = (0..scenes.max(1))
        .map(|_| {
            let boxes = (0..n * n)
                .map(|loc| {
                    let s = stride as f64;
                    let cx = ((loc / n) as f64 + 0.5) * s + rng.uniform_in(-0.5, 0.5) * s;
                    let cy = ((loc % n) as f64 + 0.5) * s + rng.uniform_in(-0.5, 0.5) * s;
                    BBox::from_center(cx, cy, rng.uniform_in(8.0, 48.0), rng.uniform_in(8.0, 48.0))
                })
                .collect();
            BoxMap::new(n, n, boxes)
        })
        .collect::<Result<_>>()?;
    Ok(AnchorSet {
        source: "random boxes around each cell (extents 8-48 px, stride 8)".into(),
        kernel,
        stride,
        maps,
        learned: None,
    })
}

fn checkpoint_anchors(path: &Path, seed: u64, scenes: usize) -> Result<AnchorSet> {
    let (config, net, _) = load_checkpoint(path)?;
    let kernel = Kernel::square(config.adm_kernel);
    let data = make_dataset(seed, scenes.max(1), config.image_size, true);
    let mut maps = Vec::new();
    let mut learned = Vec::new();
    for s in &data {
        let fwd = forward(&net, &config, &s.image(), None)?;
        if config.adm_variant == AdmVariant::LearnedDeform {
            let off = fwd.offsets.as_ref().expect("learned arm has offsets");
            let (h, w) = (off.height(), off.width());
            learned.push((0..h * w).map(|l| off.at_location(l / w, l % w)).collect());
        }
        maps.push(fwd.refined);
    }
    Ok(AnchorSet {
        source: format!(
            "refined anchors of checkpoint {} ({})",
            path.display(),
            config.adm_variant
        ),
        kernel,
        stride: config.stride,
        maps,
        learned: (config.adm_variant == AdmVariant::LearnedDeform).then_some(learned),
    })
}

fn arm_rois(set: &AnchorSet, arm: AdmVariant) -> Result<(Vec<BBox>, Vec<BBox>)> {
    let (mut rois, mut anchors) = (Vec::new(), Vec::new());
    for (m, map) in set.maps.iter().enumerate() {
        let w = map.width;
        let roiconv = if arm == AdmVariant::Roiconv {
            Some(roiconv_offsets::<f64>(map, set.kernel, set.stride)?)
        } else {
            None
        };
        for (loc, a) in map.boxes.iter().enumerate() {
            let (x, y) = (loc / w, loc % w);
            let roi = match arm {
                AdmVariant::VanillaConv => implicit_roi(x, y, set.kernel, set.stride),
                AdmVariant::Roiconv => {
                    let off = roiconv.as_ref().expect("computed above").at_location(x, y);
                    decode_offsets_to_roi(&off, set.kernel, x, y, set.stride)?
                }
                AdmVariant::LearnedDeform => {
                    let learned = set.learned.as_ref().ok_or_else(|| {
                        Error::Config(
                            "the learned_deform arm needs a learned_deform checkpoint".into(),
                        )
                    })?;
                    decode_offsets_to_roi(&learned[m][loc], set.kernel, x, y, set.stride)?
                }
            };
            rois.push(roi);
            anchors.push(*a);
        }
    }
    Ok((rois, anchors))
}

pub fn run_analyze(config: &AnalyzeConfig, seed: u64) -> Result<AnalyzeReport> {
    if config.strides.contains(&0) || config.kernels.contains(&0) {
        return Err(Error::Config("strides and kernels must be positive".into()));
    }
    if config
        .anchor_scales
        .iter()
        .chain(&config.anchor_ratios)
        .any(|v| !(*v > 0.0))
    {
        return Err(Error::Config(
            "anchor scales and ratios must be positive".into(),
        ));
    }
    if config.arms.contains(&AdmVariant::LearnedDeform) && config.checkpoint.is_none() {
        return Err(Error::Config(
            "the learned_deform arm needs a checkpoint".into(),
        ));
    }
    let mut implicit_rois = Vec::new();
    let mut misalignment = Vec::new();
    for &stride in &config.strides {
        for &kernel in &config.kernels {
            let (ex, ey) = implicit_roi_size(stride, kernel);
            implicit_rois.push(ImplicitRoiSize {
                stride,
                kernel,
                extent_x: ex,
                extent_y: ey,
            });
            let k = Kernel::square(kernel);
            // location far enough from the border that nothing is cut off
            let roi = implicit_roi(kernel, kernel, k, stride);
            let (cx, cy) = roi.center();
            for &scale in &config.anchor_scales {
                for &ratio in &config.anchor_ratios {
                    let side = scale * stride as f64;
                    let anchor =
                        BBox::from_center(cx, cy, side * ratio.sqrt(), side / ratio.sqrt());
                    misalignment.push(MisalignmentRow {
                        stride,
                        kernel,
                        anchor_scale: scale,
                        anchor_ratio: ratio,
                        anchor_extent_x: anchor.extent_x(),
                        anchor_extent_y: anchor.extent_y(),
                        iou: iou(&roi, &anchor),
                    });
                }
            }
        }
    }
    let kernel = Kernel::square(*config.kernels.first().unwrap_or(&3));
    let set = match &config.checkpoint {
        Some(p) => checkpoint_anchors(p, seed, config.scenes)?,
        None => random_anchors(seed, config.scenes, kernel)?,
    };
    let histograms = config
        .arms
        .iter()
        .map(|&arm| {
            let (rois, anchors) = arm_rois(&set, arm)?;
            Ok(ArmHistogram {
                arm,
                histogram: alignment_histogram(&rois, &anchors, config.bin_width)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AnalyzeReport {
        config: config.clone(),
        implicit_rois,
        misalignment,
        anchor_source: set.source,
        histograms,
    })
}
