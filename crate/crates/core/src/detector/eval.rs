//! Inference and COCO-style average precision.

use serde::{Deserialize, Serialize};

use super::config::DetectionConfig;
use super::model::{adm_box, forward, Network};
use super::scene::{GroundTruth, ShapeClass, SyntheticScene};
use crate::boxes::{iou, nms, Detection};
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

const RECALL_POINTS: usize = 101;

/// Final detections for one scene. Only ADM scores are used; the DPM
/// contributes its refined anchors (box regression) and nothing else.
pub fn detect(
    net: &Network,
    config: &DetectionConfig,
    scene: &SyntheticScene,
) -> Result<Vec<Detection>> {
    let fwd = forward(net, config, &scene.image(), None)?;
    let (_, h, w) = fwd.adm_cls.dims3()?;
    let plane = h * w;
    let lim = config.image_size as f64;
    let mut out = Vec::new();
    for class in 0..ShapeClass::COUNT {
        let mut cands = Vec::new();
        for loc in 0..plane {
            let score = sigmoid(fwd.adm_cls.data()[class * plane + loc]);
            if score >= config.score_threshold {
                let b = adm_box(&fwd, loc).clamp(lim, lim, 0.0);
                if b.area() > 0.0 {
                    cands.push((b, score));
                }
            }
        }
        for k in nms(&cands, config.nms_iou) {
            out.push(Detection {
                bbox: cands[k].0,
                score: cands[k].1,
                class,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(config.max_detections);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over IoU thresholds 0.5:0.05:0.95 and over classes.
    pub map: f64,
    /// Mean over IoU thresholds, per class (`None` when the class has no
    /// ground truth and is left out of the mean).
    pub per_class: Vec<Option<f64>>,
}

/// Average precision of one class at one IoU threshold, or `None` when the
/// class has no ground truth. Detections are matched greedily in descending
/// score order to the highest-IoU unmatched ground truth of the same image;
/// precision is made monotone and sampled at 101 recall points.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    class: usize,
    iou_thr: f64,
) -> Option<f64> {
    let npos: usize = ground_truth
        .iter()
        .map(|g| g.iter().filter(|o| o.class.index() == class).count())
        .sum();
    if npos == 0 {
        return None;
    }
    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|d| d.class == class).map(move |d| (img, d)))
        .collect();
    // stable sort: equal scores keep image order
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for (img, d) in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in ground_truth[*img].iter().enumerate() {
            if g.class.index() != class || used[*img][k] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            used[*img][k] = true;
        }
        tp.push(best.is_some());
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in &tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / npos as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let k = recall.partition_point(|&v| v < level);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// AP@0.5, AP@0.75 and mAP@[0.5:0.95] over all classes with ground truth.
/// Without any ground truth every metric is 0.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
) -> Result<ApMetrics> {
    if detections.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one scene".into(),
        ));
    }
    if detections.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} scenes",
            detections.len(),
            ground_truth.len()
        )));
    }
    let thresholds = iou_thresholds();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let mut per_class = Vec::with_capacity(ShapeClass::COUNT);
    let (mut ap50, mut ap75) = (Vec::new(), Vec::new());
    for class in 0..ShapeClass::COUNT {
        let aps: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| average_precision(detections, ground_truth, class, t))
            .collect();
        match aps[0] {
            None => per_class.push(None),
            Some(a50) => {
                ap50.push(a50);
                ap75.push(aps[5].expect("same ground truth at every threshold"));
                let all: Vec<f64> = aps.iter().flatten().copied().collect();
                per_class.push(Some(mean(&all)));
            }
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ApMetrics {
        ap50: mean(&ap50),
        ap75: mean(&ap75),
        map: mean(&present),
        per_class,
    })
}

/// Runs [`detect`] on every scene and scores the result.
pub fn evaluate(
    net: &Network,
    config: &DetectionConfig,
    scenes: &[SyntheticScene],
) -> Result<ApMetrics> {
    if scenes.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one scene".into(),
        ));
    }
    let dets = scenes
        .iter()
        .map(|s| detect(net, config, s))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(|s| s.objects.clone()).collect();
    evaluate_detections(&dets, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
        let bbox = BBox::new(x1, y1, x2, y2).unwrap();
        GroundTruth {
            bbox,
            class: ShapeClass::of(&bbox),
        }
    }

    fn det(g: &GroundTruth, score: f64) -> Detection {
        Detection {
            bbox: g.bbox,
            score,
            class: g.class.index(),
        }
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![
            vec![gt(0.0, 0.0, 30.0, 10.0), gt(40.0, 40.0, 50.0, 50.0)],
            vec![gt(5.0, 5.0, 15.0, 40.0)],
        ];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|o| det(o, 1.0)).collect())
            .collect();
        let m = evaluate_detections(&dets, &gts).unwrap();
        assert_eq!((m.ap50, m.ap75, m.map), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_detections() {
        let gts = vec![vec![gt(0.0, 0.0, 30.0, 10.0)]];
        let m = evaluate_detections(&[vec![]], &gts).unwrap();
        assert_eq!(m.map, 0.0);
        assert!(evaluate_detections(&[], &[]).is_err());
    }

    #[test]
    fn missing_classes_are_skipped() {
        let g = gt(0.0, 0.0, 30.0, 10.0);
        let m = evaluate_detections(&[vec![det(&g, 0.9)]], &[vec![g]]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.per_class.iter().filter(|c| c.is_none()).count(), 2);
    }

    #[test]
    fn thresholds() {
        let t = iou_thresholds();
        assert_eq!(t.len(), 10);
        assert!((t[9] - 0.95).abs() < 1e-12 && t[5] == 0.75);
    }
}
