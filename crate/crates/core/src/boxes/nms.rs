use super::{iou, BBox};

/// Greedy non-maximum suppression. Returns indices of the kept detections
/// in descending score order; equal scores keep the lower index first. A
/// detection is suppressed when its IoU with an already kept one exceeds
/// `iou_thr`.
pub fn nms(detections: &[(BBox, f64)], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].1.total_cmp(&detections[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let b = &detections[idx].0;
        if kept.iter().all(|&k| iou(&detections[k].0, b) <= iou_thr) {
            kept.push(idx);
        }
    }
    kept
}
