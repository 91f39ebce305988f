//! NMS, AP and label assignment against independent oracles.

mod common;

use aligndet::boxes::{assign_labels, iou, nms, Label};
use common::{bbox, check_ap_fixtures, check_label_grids, check_nms_oracle, exhaustive_nms};

#[test]
fn nms_matches_exhaustive_oracle() {
    check_nms_oracle(200, 11).unwrap();
}

#[test]
fn nms_chain_keeps_both_ends() {
    // A-B and B-C overlap at 0.6, A-C at 1/3
    let a = bbox(0.0, 0.0, 10.0, 10.0);
    let b = bbox(0.0, 2.5, 10.0, 12.5);
    let c = bbox(0.0, 5.0, 10.0, 15.0);
    assert!((iou(&a, &b) - 0.6).abs() < 1e-12 && (iou(&b, &c) - 0.6).abs() < 1e-12);
    let dets = [(a, 0.9), (b, 0.8), (c, 0.7)];
    assert_eq!(nms(&dets, 0.5), vec![0, 2]);
    assert_eq!(exhaustive_nms(&dets, 0.5), vec![0, 2]);
}

#[test]
fn ap_hand_computed_fixtures() {
    check_ap_fixtures().unwrap();
}

#[test]
fn label_assignment_grids() {
    check_label_grids().unwrap();
}

#[test]
fn empty_ground_truth_is_all_negative() {
    let anchors = [bbox(0.0, 0.0, 4.0, 4.0), bbox(2.0, 2.0, 9.0, 9.0)];
    let a = assign_labels(&anchors, &[], 0.5, 0.4).unwrap();
    assert!(a.labels.iter().all(|l| *l == Label::Negative));
}
