//! Max-IoU label assignment with a foreground/background threshold pair.

use super::{encode, iou, BBox, Delta};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive { gt: usize },
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    pub labels: Vec<Label>,
    /// Best IoU of each anchor against any ground truth (0 without ground truth).
    pub max_iou: Vec<f64>,
    /// Regression target of each positive anchor.
    pub targets: Vec<Option<Delta>>,
}

impl LabelAssignment {
    pub fn num_positive(&self) -> usize {
        self.count(|l| matches!(l, Label::Positive { .. }))
    }

    pub fn num_negative(&self) -> usize {
        self.count(|l| *l == Label::Negative)
    }

    pub fn num_ignored(&self) -> usize {
        self.count(|l| *l == Label::Ignore)
    }

    fn count(&self, pred: impl Fn(&Label) -> bool) -> usize {
        self.labels.iter().filter(|l| pred(l)).count()
    }
}

/// Anchors with best IoU `>= fg` are positive, `< bg` negative, the band in
/// between ignored. With `force_match`, every ground truth additionally
/// claims its highest-IoU anchor (lowest index on ties) so none goes
/// unmatched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matcher {
    pub fg: f64,
    pub bg: f64,
    pub force_match: bool,
}

impl Matcher {
    pub fn new(fg: f64, bg: f64) -> Result<Self> {
        if !(fg >= bg) || !(0.0..=1.0).contains(&fg) || !(0.0..=1.0).contains(&bg) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= bg <= fg <= 1, got fg {fg} bg {bg}"
            )));
        }
        Ok(Self {
            fg,
            bg,
            force_match: true,
        })
    }

    pub fn assign(&self, anchors: &[BBox], gts: &[BBox]) -> Result<LabelAssignment> {
        let n = anchors.len();
        let mut labels = vec![Label::Negative; n];
        let mut max_iou = vec![0.0; n];
        if gts.is_empty() {
            return Ok(LabelAssignment {
                labels,
                max_iou,
                targets: vec![None; n],
            });
        }
        // best anchor per gt: (iou, anchor index)
        let mut best_anchor = vec![(0.0f64, usize::MAX); gts.len()];
        for (a, anchor) in anchors.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(anchor, gt);
                if v > best.0 {
                    best = (v, g);
                }
                if v > best_anchor[g].0 {
                    best_anchor[g] = (v, a);
                }
            }
            max_iou[a] = best.0;
            labels[a] = if best.0 >= self.fg {
                Label::Positive { gt: best.1 }
            } else if best.0 < self.bg {
                Label::Negative
            } else {
                Label::Ignore
            };
        }
        if self.force_match {
            for (g, &(v, a)) in best_anchor.iter().enumerate() {
                if v > 0.0 && !matches!(labels[a], Label::Positive { .. }) {
                    labels[a] = Label::Positive { gt: g };
                }
            }
        }
        let targets = labels
            .iter()
            .zip(anchors)
            .map(|(label, anchor)| match label {
                Label::Positive { gt } => encode(anchor, &gts[*gt]).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(LabelAssignment {
            labels,
            max_iou,
            targets,
        })
    }
}

pub fn assign_labels(anchors: &[BBox], gts: &[BBox], fg: f64, bg: f64) -> Result<LabelAssignment> {
    Matcher::new(fg, bg)?.assign(anchors, gts)
}
