//! Two-file checkpoints: a JSON manifest and a blob of little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

const FORMAT: &str = "mpdt-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of `f32` elements.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn describe<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut offset = 0;
        let entries = store
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    count: t.numel(),
                };
                offset += 4 * t.numel();
                e
            })
            .collect();
        Manifest { format: FORMAT.into(), dtype: "f32-le".into(), entries }
    }
}

/// Writes `store` as `manifest_path` (JSON) plus `blob_path` (raw f32).
pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let manifest = Manifest::describe(store);
    let mut blob = Vec::with_capacity(4 * store.total_len());
    for (_, t) in store.iter() {
        for v in t.values() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path, text)?;
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path, blob_path: &Path) -> Result<ParamStore<f32>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != FORMAT || manifest.dtype != "f32-le" {
        return Err(TensorError::Checkpoint(format!(
            "unsupported checkpoint {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = fs::read(blob_path)?;
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for e in &manifest.entries {
        if numel(&e.shape) != e.count || e.offset != expected_offset {
            return Err(TensorError::Checkpoint(format!("inconsistent manifest entry `{}`", e.name)));
        }
        let end = e.offset + 4 * e.count;
        if end > blob.len() {
            return Err(TensorError::Checkpoint(format!("blob truncated at `{}`", e.name)));
        }
        let values = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(TensorError::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset
        )));
    }
    Ok(store)
}
