//! Model checkpoints: one TNS1 file per weight and bias plus `manifest.json`.

use std::path::Path;

use mcunet_core::unet::{Architecture, ConvLayer, ModelParams, LAYER_NAMES};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TriageError};
use crate::tns;

pub const FORMAT: &str = "mcunet-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub weight_file: String,
    pub weight_shape: Vec<usize>,
    pub bias_file: String,
    pub bias_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub architecture: Architecture,
    pub layers: Vec<LayerEntry>,
    pub dropout_p: f64,
    pub seed: u64,
    /// Epochs trained; 0 for a fresh initialisation.
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub dropout_p: f64,
    pub seed: u64,
    pub epoch: usize,
}

pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| TriageError::io(dir, e))?;
    let mut layers = Vec::with_capacity(LAYER_NAMES.len());
    for (name, layer) in LAYER_NAMES.iter().zip(ckpt.params.layers()) {
        let entry = LayerEntry {
            name: name.to_string(),
            weight_file: format!("{name}.weight.tns"),
            weight_shape: layer.weight.shape().to_vec(),
            bias_file: format!("{name}.bias.tns"),
            bias_shape: layer.bias.shape().to_vec(),
        };
        tns::write(&dir.join(&entry.weight_file), &layer.weight)?;
        tns::write(&dir.join(&entry.bias_file), &layer.bias)?;
        layers.push(entry);
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        architecture: *ckpt.params.architecture(),
        layers,
        dropout_p: ckpt.dropout_p,
        seed: ckpt.seed,
        epoch: ckpt.epoch,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("plain data"))
        .map_err(|e| TriageError::io(&path, e))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| TriageError::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| TriageError::data(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(TriageError::data(format!("{}: unknown format {:?}", path.display(), manifest.format)));
    }
    if manifest.layers.len() != LAYER_NAMES.len()
        || manifest.layers.iter().zip(LAYER_NAMES).any(|(l, name)| l.name != name)
    {
        return Err(TriageError::data(format!("{}: layer list does not match the architecture", path.display())));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        let weight = tns::read(&dir.join(&l.weight_file))?;
        let bias = tns::read(&dir.join(&l.bias_file))?;
        if weight.shape() != l.weight_shape || bias.shape() != l.bias_shape {
            return Err(TriageError::data(format!("{}: shape differs from manifest", l.name)));
        }
        layers.push(ConvLayer { weight, bias });
    }
    let params = ModelParams::new(manifest.architecture, layers)
        .map_err(|e| TriageError::data(format!("{}: {e}", dir.display())))?;
    Ok(Checkpoint { params, dropout_p: manifest.dropout_p, seed: manifest.seed, epoch: manifest.epoch })
}
