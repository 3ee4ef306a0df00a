//! Checkpoint directory format: `manifest.json` describing parameter names,
//! shapes, and byte offsets, plus `params.bin` holding little-endian f64
//! values concatenated in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChimeError, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this parameter's first value in params.bin.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    dtype: String,
    params: Vec<ManifestEntry>,
}

/// Writes the store to `dir` (created if needed).
pub fn save(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ChimeError::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.num_values() * 8);
    for (name, tensor) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in tensor.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dtype: "f64".to_string(),
        params: entries,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ChimeError::Checkpoint(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, json)
        .map_err(|e| ChimeError::io(manifest_path.display().to_string(), e))?;
    let bin_path = dir.join("params.bin");
    let mut f = fs::File::create(&bin_path)
        .map_err(|e| ChimeError::io(bin_path.display().to_string(), e))?;
    f.write_all(&blob)
        .map_err(|e| ChimeError::io(bin_path.display().to_string(), e))?;
    Ok(())
}

/// Loads a checkpoint directory back into a fresh store.
pub fn load(dir: &Path) -> Result<ParamStore> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| ChimeError::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| ChimeError::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(ChimeError::Checkpoint(format!(
            "schema version {} not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.dtype != "f64" {
        return Err(ChimeError::Checkpoint(format!(
            "dtype '{}' not supported",
            manifest.dtype
        )));
    }
    let bin_path = dir.join("params.bin");
    let mut blob = Vec::new();
    fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| ChimeError::io(bin_path.display().to_string(), e))?;

    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(ChimeError::Checkpoint(format!(
                "parameter '{}' extends past end of params.bin",
                entry.name
            )));
        }
        let values: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| ChimeError::Checkpoint(format!("parameter '{}': {e}", entry.name)))?;
        store.insert(entry.name.clone(), tensor)?;
    }
    Ok(store)
}

/// Checks that a loaded store provides exactly the parameters (names and
/// shapes) a model expects. Used on checkpoint load before inference.
pub fn validate_shapes(store: &ParamStore, expected: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let loaded = store.get(name).map_err(|_| {
            ChimeError::Checkpoint(format!("checkpoint is missing parameter '{name}'"))
        })?;
        if loaded.shape() != t.shape() {
            return Err(ChimeError::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, model expects {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
    }
    if store.len() != expected.len() {
        return Err(ChimeError::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            store.len(),
            expected.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_shapes_and_bits() {
        let mut store = ParamStore::new();
        store
            .insert("b.w", Tensor::new(vec![2, 2], vec![1.5, -2.25, 1e-300, 3.0]).unwrap())
            .unwrap();
        store
            .insert("a.b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&store, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        let names: Vec<&str> = loaded.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b.w", "a.b"]);
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            assert_eq!(l.values(), t.values());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        save(&store, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.json");
        let doctored = fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&manifest, doctored).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, ChimeError::Checkpoint(_)), "{err}");
    }
}
