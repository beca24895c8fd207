//! Tensor directory persistence: `manifest.json` plus one little-endian
//! f64 blob per tensor. Shared by mapper checkpoints and language models.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opt::ParamSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorManifest {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

/// Writes every parameter to `dir` (created if needed) and a manifest
/// describing them. Blobs are row-major little-endian f64.
pub fn save_tensors(dir: &Path, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, value) in params.iter() {
        let file = blob_name(name);
        let mut bytes = Vec::with_capacity(value.len() * 8);
        for v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: value.nrows(),
            cols: value.ncols(),
            file,
        });
    }
    let manifest = TensorManifest {
        dtype: "f64le".to_string(),
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads every tensor named in the manifest, failing with an integrity error
/// if a blob is missing or its size disagrees with the declared shape.
pub fn load_tensors(dir: &Path) -> Result<ParamSet> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path)
        .map_err(|e| Error::Integrity(format!("missing manifest in {}: {e}", dir.display())))?;
    let manifest: TensorManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    if manifest.dtype != "f64le" {
        return Err(Error::Format(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)
            .map_err(|_| Error::Integrity(format!("tensor {} missing blob {}", entry.name, entry.file)))?;
        let expected = entry.rows * entry.cols * 8;
        if bytes.len() != expected {
            return Err(Error::Integrity(format!(
                "tensor {}: blob {} has {} bytes, expected {}",
                entry.name,
                entry.file,
                bytes.len(),
                expected
            )));
        }
        let mut data = Vec::with_capacity(entry.rows * entry.cols);
        for chunk in bytes.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let value = Array2::from_shape_vec((entry.rows, entry.cols), data)
            .map_err(|e| Error::Format(format!("tensor {}: {e}", entry.name)))?;
        params.insert(&entry.name, value);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::new();
        params.insert("a.b", array![[1.0, -2.5], [f64::MIN_POSITIVE, 3.25]]);
        params.insert("c", array![[0.1]]);
        save_tensors(dir.path(), &params).unwrap();
        let back = load_tensors(dir.path()).unwrap();
        for ((n1, v1), (n2, v2)) in params.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn truncated_blob_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::new();
        params.insert("w", array![[1.0, 2.0, 3.0]]);
        save_tensors(dir.path(), &params).unwrap();
        let blob = dir.path().join("w.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
        match load_tensors(dir.path()) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_blob_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::new();
        params.insert("w", array![[1.0]]);
        save_tensors(dir.path(), &params).unwrap();
        std::fs::remove_file(dir.path().join("w.bin")).unwrap();
        assert!(matches!(
            load_tensors(dir.path()),
            Err(Error::Integrity(_))
        ));
    }
}
