//! Checkpoints: one raw little-endian float32 file per tensor plus a JSON
//! manifest carrying the architecture, seed, calibration layers and schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::cnn::{Cnn, CnnArch, ModelHandle};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: CnnArch,
    pub seed: u64,
    pub calibration_layers: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, model: &ModelHandle) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (layer, name, t) in model.params().tensors() {
        let file = format!("{layer}.{name}.f32");
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let p = dir.join(&file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        tensors.push(TensorEntry {
            layer: layer.to_string(),
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        arch: model.arch().clone(),
        seed: model.seed(),
        calibration_layers: model.calibration_layers().to_vec(),
        tensors,
    };
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelHandle> {
    let p = dir.join("manifest.json");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    let mut model = Cnn::new(manifest.arch.clone(), manifest.seed)?;
    if model.calibration_layers() != manifest.calibration_layers.as_slice() {
        return Err(Error::SchemaMismatch(format!(
            "checkpoint calibration layers {:?} differ from the architecture's {:?}",
            manifest.calibration_layers,
            model.calibration_layers()
        )));
    }
    let mut tree = model.export_parameters();
    for entry in &manifest.tensors {
        let p = dir.join(&entry.file);
        let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if raw.len() != entry.shape.iter().product::<usize>() * 4 {
            return Err(Error::Format {
                path: p,
                reason: format!("size does not match shape {:?}", entry.shape),
            });
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let slot = tree
            .get_mut(&entry.layer, &entry.name)
            .ok_or_else(|| Error::SchemaMismatch(format!("unexpected tensor {}.{}", entry.layer, entry.name)))?;
        if slot.shape() != entry.shape.as_slice() {
            return Err(Error::SchemaMismatch(format!(
                "{}.{} has shape {:?}, expected {:?}",
                entry.layer,
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::from_vec(&entry.shape, data)?;
    }
    if manifest.tensors.len() != tree.tensors().count() {
        return Err(Error::SchemaMismatch("checkpoint is missing tensors".into()));
    }
    model.import_parameters(&tree)?;
    Ok(model)
}
