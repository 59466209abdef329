//! Manifest + blob container shared by checkpoints, quantization bundles and
//! datasets: a JSON manifest listing `{name, shape, offset, byte_length}` per
//! tensor and one blob of little-endian binary32 values in manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    header: Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

/// Blob file that sits next to a manifest: `model.json` → `model.bin`.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Saves `tensors` (stored as binary32) plus a free-form JSON header.
pub fn save(path: &Path, format: &str, header: Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let blob_path = blob_path_for(path);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: format.to_string(),
        blob: blob_path
            .file_name()
            .expect("manifest has a file name")
            .to_string_lossy()
            .into_owned(),
        header,
        tensors: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&blob_path, &blob)?;
    write_atomic(path, text.as_bytes())
}

/// Loaded container: header plus tensors in manifest order.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Loaded {
    /// Removes and returns the tensor called `name`, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: vec![],
            })?;
        let (_, t) = self.tensors.remove(idx);
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }
}

pub fn load(path: &Path, format: &str) -> Result<Loaded> {
    let bad = |detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != format {
        return Err(bad(format!("format `{}`, expected `{format}`", manifest.format)));
    }
    let blob_path = path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.byte_length != 4 * numel as u64 {
            return Err(Error::TensorShape {
                name: entry.name,
                expected: entry.shape,
                found: vec![(entry.byte_length / 4) as usize],
            });
        }
        let end = entry.offset + entry.byte_length;
        if end > blob.len() as u64 {
            return Err(Error::Truncated {
                path: blob_path,
                needed: end,
                available: blob.len() as u64,
            });
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| bad(format!("{}: {e}", entry.name)))?;
        tensors.push((entry.name, t));
    }
    Ok(Loaded {
        header: manifest.header,
        tensors,
    })
}

/// Rounds every element to binary32 precision.
pub fn snap_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
