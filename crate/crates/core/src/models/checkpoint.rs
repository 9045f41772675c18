//! On-disk checkpoints.
//!
//! A checkpoint directory holds `manifest.json`, `tensors.bin` (every
//! parameter as little-endian f64, concatenated in manifest order) and
//! `masks.bin` in the mask artifact format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::pruning::{read_mask_artifact, write_mask_artifact};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const MASK_FILE: &str = "masks.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &dyn Network,
    config: serde_json::Value,
    seed: u64,
    step: u64,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            offset,
        });
        offset += p.value.len();
        for v in p.value.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        config,
        seed,
        step,
        tensors,
    };
    let tensor_path = dir.join(TENSOR_FILE);
    fs::write(&tensor_path, blob).map_err(|e| Error::io(tensor_path, e))?;
    write_mask_artifact(dir.join(MASK_FILE), &model.prune_group())?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

/// Restores values and masks into `model`, which must have the same layout.
pub fn load_checkpoint(dir: impl AsRef<Path>, model: &mut dyn Network) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let tensor_path = dir.join(TENSOR_FILE);
    let blob = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    if blob.len() % 8 != 0 {
        return Err(Error::format(&tensor_path, "length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(Error::format(
            &manifest_path,
            format!("{} tensors, model has {}", manifest.tensors.len(), params.len()),
        ));
    }
    let mut restored = Vec::with_capacity(params.len());
    for (p, t) in params.iter().zip(&manifest.tensors) {
        if p.name != t.name || p.value.shape() != (t.rows, t.cols) {
            return Err(Error::format(
                &manifest_path,
                format!("tensor {} ({}x{}) does not match model tensor {}", t.name, t.rows, t.cols, p.name),
            ));
        }
        let end = t.offset + t.rows * t.cols;
        let slice = values
            .get(t.offset..end)
            .ok_or_else(|| Error::format(&tensor_path, format!("truncated at tensor {}", t.name)))?;
        restored.push(Matrix::new(t.rows, t.cols, slice.to_vec())?);
    }
    for (p, v) in params.into_iter().zip(restored) {
        p.value = v;
    }
    let masks = read_mask_artifact(dir.join(MASK_FILE))?;
    model.install_masks(&masks)?;
    Ok(manifest)
}
