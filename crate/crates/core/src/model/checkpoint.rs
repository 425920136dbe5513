//! Checkpoint format: a JSON manifest plus one little-endian `f32` blob.
//!
//! The manifest lists every tensor in blob order with its shape, dtype tag,
//! byte offset and kind, together with the generating model configuration and
//! free-form training metadata.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use mtau_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, ParamEntry, ParamKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mtau-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub blob: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(blob)
}

/// Writes `<stem>.json` and `<stem>.bin` next to each other.
pub fn save_checkpoint(params: &ModelParams<f32>, manifest_path: &Path, metadata: serde_json::Value) -> Result<()> {
    let blob_name = manifest_path
        .with_extension("bin")
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::data(manifest_path.display().to_string(), "checkpoint path needs a file name"))?
        .to_string();
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.entries().len());
    for (name, entry) in params.entries() {
        tensors.push(TensorRecord {
            name: name.clone(),
            shape: entry.tensor.shape().to_vec(),
            dtype: "f32le".into(),
            offset: blob.len() as u64,
            kind: entry.kind,
        });
        for v in entry.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        blob: blob_name.clone(),
        config: params.config().clone(),
        metadata,
        tensors,
    };
    if let Some(dir) = manifest_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bin = blob_path(manifest_path, &blob_name);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let ctx = manifest_path.display().to_string();
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::data(ctx, format!("unknown checkpoint format {:?}", manifest.format)));
    }
    manifest.config.validate()?;
    let bin = blob_path(manifest_path, &manifest.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut entries = IndexMap::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for rec in &manifest.tensors {
        if rec.dtype != "f32le" {
            return Err(Error::data(&ctx, format!("{}: unsupported dtype {}", rec.name, rec.dtype)));
        }
        if rec.offset != expected_offset {
            return Err(Error::data(&ctx, format!("{}: offset {} out of order", rec.name, rec.offset)));
        }
        let len: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + 4 * len;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::data(&ctx, format!("{}: blob too short", rec.name)))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = Tensor::new(&rec.shape, data)?;
        if entries.insert(rec.name.clone(), ParamEntry { tensor, kind: rec.kind }).is_some() {
            return Err(Error::data(&ctx, format!("duplicate tensor name {}", rec.name)));
        }
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(Error::data(&ctx, "blob has trailing bytes"));
    }
    Ok((ModelParams::from_entries(manifest.config.clone(), entries), manifest))
}
