//! Independent oracles shared by the integration tests and the acceptance
//! runner.

#![allow(dead_code)]

use aligndet::boxes::{assign_labels, iou, nms, BBox, Detection, Label};
use aligndet::detector::{average_precision, GroundTruth, ShapeClass};
use aligndet::rng::Rng;

pub fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).expect("valid box")
}

/// Greedy NMS found by enumerating every subset of boxes: the kept set is
/// the unique subset in which a box is kept exactly when no kept box ahead
/// of it (higher score, lower index on ties) overlaps it above `thr`.
pub fn exhaustive_nms(dets: &[(BBox, f64)], thr: f64) -> Vec<usize> {
    let n = dets.len();
    assert!(n <= 16, "exhaustive oracle is exponential");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = order.iter().enumerate().all(|(p, &i)| {
            let suppressed = order[..p]
                .iter()
                .any(|&j| kept(j) && iou(&dets[i].0, &dets[j].0) > thr);
            kept(i) != suppressed
        });
        if consistent {
            found.push(
                order
                    .iter()
                    .copied()
                    .filter(|&i| kept(i))
                    .collect::<Vec<_>>(),
            );
        }
    }
    assert_eq!(found.len(), 1, "the greedy fixed point is unique");
    found.pop().expect("one subset")
}

/// Up to 10 heavily overlapping boxes with tied scores.
pub fn random_nms_instance(rng: &mut Rng) -> (Vec<(BBox, f64)>, f64) {
    let n = rng.range(0, 11);
    let dets = (0..n)
        .map(|_| {
            let (x, y) = (rng.uniform_in(0.0, 20.0), rng.uniform_in(0.0, 20.0));
            let b = bbox(
                x,
                y,
                x + rng.uniform_in(1.0, 15.0),
                y + rng.uniform_in(1.0, 15.0),
            );
            (b, rng.range(1, 6) as f64 / 5.0)
        })
        .collect();
    let thr = [0.3, 0.5, 0.7][rng.range(0, 3)];
    (dets, thr)
}

/// Compares `nms` with the exhaustive oracle on `instances` random cases.
pub fn check_nms_oracle(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = Rng::new(seed);
    for k in 0..instances {
        let (dets, thr) = random_nms_instance(&mut rng);
        let got = nms(&dets, thr);
        let want = exhaustive_nms(&dets, thr);
        if got != want {
            return Err(format!("instance {k}: nms {got:?}, oracle {want:?}"));
        }
    }
    Ok(())
}

fn gt(b: BBox) -> GroundTruth {
    GroundTruth {
        bbox: b,
        class: ShapeClass::of(&b),
    }
}

fn det(b: BBox, score: f64, class: ShapeClass) -> Detection {
    Detection {
        bbox: b,
        score,
        class: class.index(),
    }
}

/// `(name, detections, ground truth, class, AP@0.5 worked out by hand)`.
pub type ApFixture = (
    &'static str,
    Vec<Vec<Detection>>,
    Vec<Vec<GroundTruth>>,
    usize,
    f64,
);

/// `(name, anchors, fg threshold, bg threshold, expected labels)`.
pub type LabelGrid = (&'static str, Vec<BBox>, f64, f64, Vec<Label>);

pub fn ap_fixtures() -> Vec<ApFixture> {
    let sq = ShapeClass::Square;
    let a = bbox(0.0, 0.0, 10.0, 10.0);
    let b = bbox(20.0, 20.0, 30.0, 30.0);
    let far = bbox(40.0, 40.0, 50.0, 50.0);
    vec![
        // TP (IoU 0.9) at 0.9, FP at 0.8: precision 1 at recall 1
        (
            "tp_then_fp",
            vec![vec![
                det(bbox(0.0, 0.0, 10.0, 9.0), 0.9, sq),
                det(far, 0.8, sq),
            ]],
            vec![vec![gt(a)]],
            sq.index(),
            1.0,
        ),
        // FP, TP, TP: precision (0, 1/2, 2/3) at recall (0, 1/2, 1); the
        // interpolated envelope is 2/3 at every recall level
        (
            "fp_first",
            vec![vec![det(far, 0.9, sq), det(a, 0.8, sq), det(b, 0.7, sq)]],
            vec![vec![gt(a), gt(b)]],
            sq.index(),
            2.0 / 3.0,
        ),
        // TP, FP, one gt missed: precision 1 up to recall 1/2, i.e. on 51
        // of the 101 recall levels, 0 beyond
        (
            "half_recall",
            vec![vec![det(a, 0.9, sq), det(far, 0.8, sq)]],
            vec![vec![gt(a), gt(b)]],
            sq.index(),
            51.0 / 101.0,
        ),
    ]
}

pub fn check_ap_fixtures() -> Result<(), String> {
    for (name, dets, gts, class, want) in ap_fixtures() {
        let got =
            average_precision(&dets, &gts, class, 0.5).ok_or(format!("{name}: no ground truth"))?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("{name}: AP50 {got}, expected {want}"));
        }
    }
    Ok(())
}

/// Boxes of height 10 over the first `w` columns; IoU with the 10×10 gt at
/// the origin is exactly `w / 10`.
fn strip(w: f64) -> BBox {
    bbox(0.0, 0.0, 10.0, w)
}

/// `(name, anchors, fg, bg, expected labels)` against the single gt
/// `(0, 0, 10, 10)`.
pub fn label_grids() -> Vec<LabelGrid> {
    use Label::{Ignore, Negative, Positive};
    let p = Positive { gt: 0 };
    let far = bbox(50.0, 50.0, 60.0, 60.0);
    vec![
        // ignore band is exactly [bg, fg)
        (
            "band_0.5_0.4",
            vec![
                strip(10.0),
                strip(5.0),
                strip(4.5),
                strip(4.0),
                strip(3.99),
                far,
            ],
            0.5,
            0.4,
            vec![p, p, Ignore, Ignore, Negative, Negative],
        ),
        // equal thresholds leave no ignore band
        (
            "no_band_0.7_0.7",
            vec![strip(10.0), strip(7.0), strip(6.99), strip(4.5), far],
            0.7,
            0.7,
            vec![p, p, Negative, Negative, Negative],
        ),
        // best IoU 0.3 (a tie): only the force-match, at the lower index
        (
            "force_match",
            vec![
                strip(2.0),
                strip(3.0),
                bbox(0.0, 7.0, 10.0, 10.0),
                strip(1.0),
            ],
            0.5,
            0.4,
            vec![Negative, p, Negative, Negative],
        ),
    ]
}

pub fn check_label_grids() -> Result<(), String> {
    let gts = [bbox(0.0, 0.0, 10.0, 10.0)];
    for (name, anchors, fg, bg, want) in label_grids() {
        let got = assign_labels(&anchors, &gts, fg, bg).map_err(|e| e.to_string())?;
        if got.labels != want {
            return Err(format!(
                "{name}: labels {:?}, expected {want:?}",
                got.labels
            ));
        }
    }
    Ok(())
}
