//! JSON run configurations of the commands that wrap a detector config.
//! Every struct rejects unknown keys; missing keys take their defaults.

use std::path::PathBuf;

use aligndet::boxes::Detection;
use aligndet::detector::{DetectionConfig, GroundTruth};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub model: DetectionConfig,
    pub steps: usize,
    pub train_scenes: usize,
    /// Seed of the scene generator; the model seed comes from `--seed`.
    pub data_seed: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            model: DetectionConfig::default(),
            steps: 2000,
            train_scenes: 2000,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    /// Checkpoint directory written by `train`.
    pub checkpoint: Option<PathBuf>,
    /// Precomputed detections with their ground truth, evaluated as is.
    pub detections: Option<PathBuf>,
    pub eval_scenes: usize,
    pub data_seed: u64,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            checkpoint: None,
            detections: None,
            eval_scenes: 200,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareRun {
    pub model: DetectionConfig,
    pub seeds: Vec<u64>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
}

impl Default for CompareRun {
    fn default() -> Self {
        Self {
            model: DetectionConfig::default(),
            seeds: vec![0, 1, 2],
            train_scenes: 2000,
            eval_scenes: 200,
            steps: 2000,
        }
    }
}

/// Input of `eval` without a model: per scene, ground truth and detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    pub scenes: Vec<ScoredScene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredScene {
    pub ground_truth: Vec<GroundTruth>,
    /// `[x1, y1, x2, y2, score, class]` rows.
    pub detections: Vec<Detection>,
}
