//! Checkpoints: one RTEN file per parameter tensor plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::DetectionConfig;
use super::model::Network;
use crate::error::{Error, Result};
use crate::rten;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "aligndet-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    pub step: usize,
    pub config: DetectionConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes the network's parameters (not the optimizer state) into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    config: &DetectionConfig,
    net: &Network,
    step: usize,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in net.tensors() {
        let file = format!("{name}.rten");
        rten::save(dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        seed: config.seed,
        step,
        config: config.clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Rebuilds the network described by a checkpoint directory. Every tensor
/// of the configured architecture must be present with the recorded shape.
pub fn load_checkpoint(dir: &Path) -> Result<(DetectionConfig, Network, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    manifest.config.validate()?;
    let mut net = Network::init(&manifest.config);
    {
        let mut slots = net.tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, the configured network {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name {
                return Err(Error::Format(format!(
                    "expected tensor {name}, found {}",
                    entry.name
                )));
            }
            let t = rten::load(dir.join(&entry.file))?.into_f64();
            if t.shape() != slot.shape() || t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
    }
    Ok((manifest.config.clone(), net, manifest))
}
