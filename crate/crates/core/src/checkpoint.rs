//! Model persistence: a raw little-endian `f64` blob plus a JSON manifest
//! (`<blob>.json`) holding the config snapshot and tensor layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// What a checkpoint needs to score raw files: the class order and the
/// training-split normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInfo {
    pub dataset: String,
    pub class_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataInfo>,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(model: &Model, data: Option<&DataInfo>) -> (Vec<u8>, String) {
    let mut blob = Vec::with_capacity(model.store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, name, t) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        data: data.cloned(),
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    (blob, json)
}

pub fn save(model: &Model, data: Option<&DataInfo>, path: &Path) -> Result<()> {
    let (blob, json) = encode(model, data);
    std::fs::write(path, blob)?;
    std::fs::write(manifest_path(path), json)?;
    Ok(())
}

pub fn decode(blob: &[u8], json: &str) -> Result<(Model, Option<DataInfo>)> {
    let manifest: Manifest =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| 8 * t.shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, manifest describes {expected}",
            blob.len()
        )));
    }
    let mut model = Model::new(manifest.config.clone())?;
    if model.store.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        let t = model.store.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} does not match config shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let bytes = blob
            .get(entry.offset..entry.offset + 8 * t.numel())
            .ok_or_else(|| Error::Checkpoint(format!("{}: offset out of range", entry.name)))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((model, manifest.data))
}

pub fn load(path: &Path) -> Result<(Model, Option<DataInfo>)> {
    let read_err = |p: &Path, e: std::io::Error| Error::Checkpoint(format!("cannot read {}: {e}", p.display()));
    let blob = std::fs::read(path).map_err(|e| read_err(path, e))?;
    let mpath = manifest_path(path);
    let json = std::fs::read_to_string(&mpath).map_err(|e| read_err(&mpath, e))?;
    decode(&blob, &json)
}
