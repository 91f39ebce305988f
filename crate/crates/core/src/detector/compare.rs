//! Trains the three alignment arms under identical seeds and compares them.

use serde::Serialize;

use super::config::{AdmVariant, DetectionConfig};
use super::eval::{evaluate, ApMetrics};
use super::model::{forward, Forward, Network};
use super::scene::{make_dataset, SyntheticScene};
use super::train::train;
use crate::boxes::{alignment_histogram, decode_offsets_to_roi, BBox, Histogram};
use crate::conv::{implicit_roi, Kernel};
use crate::error::{Error, Result};

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;

/// Image-space RoIs the alignment convolution actually samples, one per
/// feature cell: the plain convolution's implicit RoI, or the RoI recovered
/// from the deformed sampling points.
pub fn sampled_rois(fwd: &Forward, kernel: Kernel) -> Result<Vec<BBox>> {
    let (_, h, w) = fwd.features.dims();
    let s = fwd.features.stride;
    (0..h * w)
        .map(|loc| {
            let (x, y) = (loc / w, loc % w);
            match &fwd.offsets {
                None => Ok(implicit_roi(x, y, kernel, s)),
                Some(off) => decode_offsets_to_roi(&off.at_location(x, y), kernel, x, y, s),
            }
        })
        .collect()
}

/// IoU histogram between sampled RoIs and refined anchors over `scenes`.
pub fn alignment_report(
    net: &Network,
    config: &DetectionConfig,
    scenes: &[SyntheticScene],
) -> Result<Histogram> {
    let kernel = Kernel::square(config.adm_kernel);
    let (mut rois, mut anchors) = (Vec::new(), Vec::new());
    for s in scenes {
        let fwd = forward(net, config, &s.image(), None)?;
        rois.extend(sampled_rois(&fwd, kernel)?);
        anchors.extend(fwd.refined.boxes.iter().copied());
    }
    alignment_histogram(&rois, &anchors, HISTOGRAM_BIN_WIDTH)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: ApMetrics,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmReport {
    pub variant: AdmVariant,
    pub param_count: usize,
    /// Parameters of the alignment convolution and the layers after it.
    pub adm_param_count: usize,
    pub runs: Vec<SeedResult>,
    pub median_map: f64,
    /// Pooled over every seed's model on the evaluation scenes.
    pub alignment: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
}

impl ComparisonReport {
    pub fn arm(&self, v: AdmVariant) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.variant == v)
    }

    /// `variant,median_map,seed maps…,alignment_mean_iou` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,median_map");
        for s in &self.seeds {
            out.push_str(&format!(",map_seed_{s}"));
        }
        out.push_str(",mean_alignment_iou,param_count\n");
        for a in &self.arms {
            out.push_str(&format!("{},{:.6}", a.variant, a.median_map));
            for r in &a.runs {
                out.push_str(&format!(",{:.6}", r.metrics.map));
            }
            out.push_str(&format!(",{:.6},{}\n", a.alignment.mean, a.param_count));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSettings {
    pub seeds: Vec<u64>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    /// Seed of the scene generator, shared by every run.
    pub data_seed: u64,
}

/// Trains every arm once per seed. All arms see the same scenes, the same
/// batch order and the same initial values for every shared parameter.
pub fn compare_variants(
    base: &DetectionConfig,
    settings: &CompareSettings,
    mut progress: impl FnMut(AdmVariant, u64, &ApMetrics),
) -> Result<ComparisonReport> {
    if settings.seeds.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 seeds, got {}",
            settings.seeds.len()
        )));
    }
    let train_set = make_dataset(
        settings.data_seed,
        settings.train_scenes,
        base.image_size,
        false,
    );
    let eval_set = make_dataset(
        settings.data_seed,
        settings.eval_scenes,
        base.image_size,
        true,
    );
    let mut arms = Vec::new();
    for variant in AdmVariant::ALL {
        let mut runs = Vec::new();
        let (mut rois, mut anchors) = (Vec::new(), Vec::new());
        let mut counts = (0, 0);
        for &seed in &settings.seeds {
            let config = DetectionConfig {
                adm_variant: variant,
                seed,
                ..base.clone()
            };
            let (state, curve) = train(&config, &train_set, settings.steps, |_, _| {})?;
            let metrics = evaluate(&state.net, &config, &eval_set)?;
            progress(variant, seed, &metrics);
            let kernel = Kernel::square(config.adm_kernel);
            for s in &eval_set {
                let fwd = forward(&state.net, &config, &s.image(), None)?;
                rois.extend(sampled_rois(&fwd, kernel)?);
                anchors.extend(fwd.refined.boxes.iter().copied());
            }
            let n = &state.net;
            counts = (
                n.param_count(),
                [&n.adm_align, &n.adm_mid, &n.adm_cls, &n.adm_reg]
                    .iter()
                    .map(|s| s.param_count())
                    .sum(),
            );
            runs.push(SeedResult {
                seed,
                metrics,
                final_loss: curve.last().map_or(f64::NAN, |p| p.total),
            });
        }
        let maps: Vec<f64> = runs.iter().map(|r| r.metrics.map).collect();
        arms.push(ArmReport {
            variant,
            param_count: counts.0,
            adm_param_count: counts.1,
            median_map: median(&maps),
            runs,
            alignment: alignment_histogram(&rois, &anchors, HISTOGRAM_BIN_WIDTH)?,
        });
    }
    Ok(ComparisonReport {
        train_scenes: settings.train_scenes,
        eval_scenes: settings.eval_scenes,
        steps: settings.steps,
        seeds: settings.seeds.clone(),
        arms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn roiconv_rois_match_refined_anchors() {
        let config = DetectionConfig {
            backbone_channels: [2, 3, 4],
            head_channels: 4,
            ..Default::default()
        };
        let scenes = make_dataset(3, 2, 64, true);
        let h = alignment_report(&Network::init(&config), &config, &scenes).unwrap();
        assert_eq!(h.total(), 128);
        assert_eq!(*h.counts.last().unwrap(), 128);
        assert!(h.min > 1.0 - 1e-9);
        let vanilla = DetectionConfig {
            adm_variant: AdmVariant::VanillaConv,
            ..config
        };
        let h = alignment_report(&Network::init(&vanilla), &vanilla, &scenes).unwrap();
        assert!(h.mean < 1.0);
    }

    #[test]
    fn too_few_seeds() {
        let s = CompareSettings {
            seeds: vec![1, 2],
            train_scenes: 1,
            eval_scenes: 1,
            steps: 1,
            data_seed: 0,
        };
        assert!(compare_variants(&DetectionConfig::default(), &s, |_, _, _| {}).is_err());
    }
}
