//! Training objective over a batch of scenes: label assignment for both
//! heads, the four loss terms, and their gradients.

use serde::Serialize;

use super::config::DetectionConfig;
use super::loss::{focal_loss, smooth_l1};
use super::model::{anchor_map, backward, deltas_at, forward, Forward, HeadGrads, Network};
use super::scene::{ShapeClass, SyntheticScene};
use crate::boxes::{BoxMap, Label, LabelAssignment, Matcher};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub dpm_cls: f64,
    pub dpm_reg: f64,
    pub adm_cls: f64,
    pub adm_reg: f64,
    pub total: f64,
    pub dpm_positives: usize,
    pub adm_positives: usize,
}

/// Per-scene forward pass plus the labels of both heads.
struct SceneState {
    fwd: Forward,
    dpm: LabelAssignment,
    adm: LabelAssignment,
    gt_classes: Vec<usize>,
}

/// Positions of one head's entries in the batch-wide loss vectors.
#[derive(Default)]
struct Gathered {
    logits: Vec<f64>,
    targets: Vec<Option<bool>>,
    /// `(scene, flat index into the logit map)` for every logit.
    logit_at: Vec<(usize, usize)>,
    pred: Vec<f64>,
    target: Vec<f64>,
    /// `(scene, flat index into the regression map)` for every coordinate.
    reg_at: Vec<(usize, usize)>,
}

impl Gathered {
    fn add_scene(
        &mut self,
        scene: usize,
        cls: &Tensor,
        reg: &Tensor,
        labels: &LabelAssignment,
        class_of: impl Fn(usize) -> usize,
    ) {
        let classes = cls.shape()[0];
        let plane = cls.shape()[1] * cls.shape()[2];
        for (loc, label) in labels.labels.iter().enumerate() {
            for c in 0..classes {
                let t = match label {
                    Label::Positive { gt } => Some(class_of(*gt) == c),
                    Label::Negative => Some(false),
                    Label::Ignore => None,
                };
                let idx = c * plane + loc;
                self.logits.push(cls.data()[idx]);
                self.targets.push(t);
                self.logit_at.push((scene, idx));
            }
            if let Some(delta) = labels.targets[loc] {
                let pred = deltas_at(reg, loc);
                for d in 0..4 {
                    self.pred.push(pred[d]);
                    self.target.push(delta[d]);
                    self.reg_at.push((scene, d * plane + loc));
                }
            }
        }
    }
}

/// Loss value, its parts, and the parameter gradient for a batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub parts: LossParts,
    pub grads: Network,
    /// Refined anchors used for each scene, for reuse as fixed anchors.
    pub refined: Vec<BoxMap>,
}

fn run_scenes(
    net: &Network,
    config: &DetectionConfig,
    scenes: &[&SyntheticScene],
    fixed_refined: Option<&[BoxMap]>,
) -> Result<Vec<SceneState>> {
    if let Some(f) = fixed_refined {
        if f.len() != scenes.len() {
            return Err(Error::Shape(format!(
                "{} fixed anchor maps for {} scenes",
                f.len(),
                scenes.len()
            )));
        }
    }
    let anchors = anchor_map(config)?;
    let dpm_matcher = Matcher::new(config.dpm_fg, config.dpm_bg)?;
    let adm_matcher = Matcher::new(config.adm_fg, config.adm_bg)?;
    scenes
        .iter()
        .enumerate()
        .map(|(k, scene)| {
            let fwd = forward(net, config, &scene.image(), fixed_refined.map(|f| &f[k]))?;
            let gts = scene.gt_boxes();
            let dpm = dpm_matcher.assign(&anchors.boxes, &gts)?;
            let adm = adm_matcher.assign(&fwd.refined.boxes, &gts)?;
            let gt_classes = scene.objects.iter().map(|o| o.class.index()).collect();
            Ok(SceneState {
                fwd,
                dpm,
                adm,
                gt_classes,
            })
        })
        .collect()
}

/// Batch loss and gradient. Focal terms are normalized by the number of
/// positives in the whole batch; regression terms average over the
/// positives' coordinates. With `fixed_refined`, the given boxes replace the
/// refined anchors, freezing ADM label assignment and RoIConv offsets.
pub fn batch_loss(
    net: &Network,
    config: &DetectionConfig,
    scenes: &[&SyntheticScene],
    fixed_refined: Option<&[BoxMap]>,
) -> Result<BatchLoss> {
    let (parts, states, head_grads) = evaluate_objective(net, config, scenes, fixed_refined)?;
    let mut grads = net.zeros_like();
    for (state, hg) in states.iter().zip(&head_grads) {
        grads.axpy(1.0, &backward(net, config, &state.fwd, hg)?)?;
    }
    Ok(BatchLoss {
        parts,
        grads,
        refined: states.into_iter().map(|s| s.fwd.refined).collect(),
    })
}

/// Loss value only; used by finite-difference checks.
pub fn batch_loss_value(
    net: &Network,
    config: &DetectionConfig,
    scenes: &[&SyntheticScene],
    fixed_refined: Option<&[BoxMap]>,
) -> Result<f64> {
    Ok(evaluate_objective(net, config, scenes, fixed_refined)?
        .0
        .total)
}

fn evaluate_objective(
    net: &Network,
    config: &DetectionConfig,
    scenes: &[&SyntheticScene],
    fixed_refined: Option<&[BoxMap]>,
) -> Result<(LossParts, Vec<SceneState>, Vec<HeadGrads>)> {
    let states = run_scenes(net, config, scenes, fixed_refined)?;
    let mut dpm = Gathered::default();
    let mut adm = Gathered::default();
    for (k, s) in states.iter().enumerate() {
        dpm.add_scene(k, &s.fwd.dpm_cls, &s.fwd.dpm_reg, &s.dpm, |_| 0);
        adm.add_scene(k, &s.fwd.adm_cls, &s.fwd.adm_reg, &s.adm, |g| {
            s.gt_classes[g]
        });
    }
    let (alpha, gamma, beta) = (
        config.focal_alpha,
        config.focal_gamma,
        config.smooth_l1_beta,
    );
    let dpm_cls = focal_loss(&dpm.logits, &dpm.targets, alpha, gamma)?;
    let dpm_reg = smooth_l1(&dpm.pred, &dpm.target, beta)?;
    let adm_cls = focal_loss(&adm.logits, &adm.targets, alpha, gamma)?;
    let adm_reg = smooth_l1(&adm.pred, &adm.target, beta)?;
    let (wd, wa, wr) = (
        config.dpm_loss_weight,
        config.adm_loss_weight,
        config.reg_loss_weight,
    );
    let parts = LossParts {
        dpm_cls: dpm_cls.value,
        dpm_reg: dpm_reg.value,
        adm_cls: adm_cls.value,
        adm_reg: adm_reg.value,
        total: wd * (dpm_cls.value + wr * dpm_reg.value)
            + wa * (adm_cls.value + wr * adm_reg.value),
        dpm_positives: states.iter().map(|s| s.dpm.num_positive()).sum(),
        adm_positives: states.iter().map(|s| s.adm.num_positive()).sum(),
    };
    if !parts.total.is_finite() {
        return Err(Error::Domain(format!("loss is not finite: {parts:?}")));
    }

    let mut head_grads: Vec<HeadGrads> = states
        .iter()
        .map(|s| HeadGrads {
            dpm_cls: Tensor::zeros(s.fwd.dpm_cls.shape()),
            dpm_reg: Tensor::zeros(s.fwd.dpm_reg.shape()),
            adm_cls: Tensor::zeros(s.fwd.adm_cls.shape()),
            adm_reg: Tensor::zeros(s.fwd.adm_reg.shape()),
        })
        .collect();
    let scatter = |hg: &mut Vec<HeadGrads>,
                   at: &[(usize, usize)],
                   g: &[f64],
                   w: f64,
                   pick: fn(&mut HeadGrads) -> &mut Tensor| {
        for (&(scene, idx), v) in at.iter().zip(g) {
            pick(&mut hg[scene]).data_mut()[idx] += w * v;
        }
    };
    scatter(&mut head_grads, &dpm.logit_at, &dpm_cls.grad, wd, |h| {
        &mut h.dpm_cls
    });
    scatter(&mut head_grads, &dpm.reg_at, &dpm_reg.grad, wd * wr, |h| {
        &mut h.dpm_reg
    });
    scatter(&mut head_grads, &adm.logit_at, &adm_cls.grad, wa, |h| {
        &mut h.adm_cls
    });
    scatter(&mut head_grads, &adm.reg_at, &adm_reg.grad, wa * wr, |h| {
        &mut h.adm_reg
    });
    Ok((parts, states, head_grads))
}

/// Number of classification outputs of the ADM.
pub const ADM_CLASSES: usize = ShapeClass::COUNT;
