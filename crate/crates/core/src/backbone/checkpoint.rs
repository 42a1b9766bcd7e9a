//! Checkpoints: a JSON manifest with a name/shape/offset table next to a flat
//! little-endian `f32` weight blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "chromaformer-checkpoint/1";
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub weights: String,
    pub params: Vec<TensorEntry>,
}

/// Writes `checkpoint.json` and `weights.bin` into `dir`.
pub fn save(dir: &Path, config: &ModelConfig, params: &ParamStore<f32>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, value) in params.names().iter().zip(params.values()) {
        for v in value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            offset,
            len: value.len(),
        });
        offset += value.len();
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config: config.clone(),
        weights: WEIGHTS_FILE.into(),
        params: entries,
    };
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a checkpoint from its directory or manifest path and checks it
/// against the parameters the stored config declares.
pub fn load(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = fs::read(dir.join(&manifest.weights))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Format(
            "weight blob length is not a multiple of 4".into(),
        ));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let model = build_model(&manifest.config)?;
    if model.specs.len() != manifest.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config declares {}",
            manifest.params.len(),
            model.specs.len()
        )));
    }
    let mut names = Vec::with_capacity(manifest.params.len());
    let mut values = Vec::with_capacity(manifest.params.len());
    for (entry, spec) in manifest.params.iter().zip(&model.specs) {
        if entry.name != spec.name || entry.shape != spec.shape {
            return Err(Error::Format(format!(
                "tensor `{}` {:?} does not match declared `{}` {:?}",
                entry.name, entry.shape, spec.name, spec.shape
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.len)
            .filter(|&e| e <= floats.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "tensor `{}` runs past the blob",
                entry.name
            )));
        };
        names.push(entry.name.clone());
        values.push(Tensor::new(
            entry.shape.clone(),
            floats[entry.offset..end].to_vec(),
        )?);
    }
    Ok((model, ParamStore::from_parts(names, values)?))
}
