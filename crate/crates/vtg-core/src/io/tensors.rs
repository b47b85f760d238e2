//! Tensor file format: a JSON manifest (name, shape, byte offset per tensor,
//! plus free-form metadata) next to a flat little-endian `f64` blob in
//! row-major order. Round-trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's data inside the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    /// Blob filename, relative to the manifest's directory.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// One named tensor with its flat row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = RawTensor {
            name: name.into(),
            shape,
            data,
        };
        let expect: usize = t.shape.iter().product();
        if t.data.len() != expect {
            return Err(Error::Tensor {
                name: t.name.clone(),
                message: format!("data length {} != shape product {expect}", t.data.len()),
            });
        }
        Ok(t)
    }
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob)
}

/// Write `<stem>.json` + `<stem>.bin` for a set of tensors.
pub fn write_tensor_file(
    manifest_path: &Path,
    meta: serde_json::Value,
    tensors: &[RawTensor],
) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Input(format!("bad manifest path {}", manifest_path.display())))?;
    let blob_name = format!("{stem}.bin");
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for t in tensors {
        let expect: usize = t.shape.iter().product();
        if t.data.len() != expect {
            return Err(Error::Tensor {
                name: t.name.clone(),
                message: format!("data length {} != shape product {expect}", t.data.len()),
            });
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len() as u64,
        });
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = TensorManifest {
        blob: blob_name.clone(),
        tensors: entries,
        meta,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(blob_path(manifest_path, &blob_name), blob)?;
    Ok(())
}

/// Read a manifest and its blob back into named tensors.
pub fn read_tensor_file(manifest_path: &Path) -> Result<(serde_json::Value, Vec<RawTensor>)> {
    let manifest: TensorManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let blob = fs::read(blob_path(manifest_path, &manifest.blob))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(Error::Tensor {
                name: entry.name.clone(),
                message: format!(
                    "blob too small: needs bytes [{start}, {end}), blob has {}",
                    blob.len()
                ),
            });
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Tensor {
                name: entry.name.clone(),
                message: "non-finite values in blob".into(),
            });
        }
        tensors.push(RawTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    Ok((manifest.meta, tensors))
}
