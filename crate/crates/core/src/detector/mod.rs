//! Toy AlignDet: a dense proposal module refines one anchor per location,
//! and an aligned detection module classifies and regresses from features
//! aligned to the refined anchors.
//!
//! Everything runs in double precision on single-channel 64×64 synthetic
//! scenes, small enough to train on a CPU in minutes.

mod checkpoint;
mod compare;
mod config;
mod eval;
mod loss;
mod model;
mod objective;
mod scene;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, MANIFEST};
pub use compare::{
    alignment_report, compare_variants, median, sampled_rois, ArmReport, CompareSettings,
    ComparisonReport, SeedResult, HISTOGRAM_BIN_WIDTH,
};
pub use config::{AdmVariant, DetectionConfig};
pub use eval::{
    average_precision, detect, evaluate, evaluate_detections, iou_thresholds, ApMetrics,
};
pub use loss::{focal_loss, smooth_l1, LossGrad};
pub use model::{
    adm_box, anchor_map, avgpool2, avgpool2_backward, backward, deltas_at, forward, refine_anchors,
    Forward, HeadGrads, Network, MIN_ANCHOR_EXTENT,
};
pub use objective::{batch_loss, batch_loss_value, BatchLoss, LossParts, ADM_CLASSES};
pub use scene::{
    generate_scene, make_dataset, GroundTruth, ShapeClass, SyntheticScene, MAX_EXTENT, MAX_GT_IOU,
    MAX_OBJECTS, MIN_EXTENT,
};
pub use train::{loss_curve_csv, train, BatchSampler, ModelState};
