//! Tensor blob files: `weights.bin` holds every tensor as little-endian
//! float32, back to back; `manifest.json` maps each name to its byte offset
//! and shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

pub type Manifest = BTreeMap<String, BlobEntry>;

/// Resolve either a blob directory or a path to its manifest into
/// `(manifest, weights)` paths.
fn blob_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "json") {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join(WEIGHTS_FILE))
    } else {
        (path.join(MANIFEST_FILE), path.join(WEIGHTS_FILE))
    }
}

pub fn write_blob(dir: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new();
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        manifest.insert(
            name.clone(),
            BlobEntry {
                offset: bytes.len(),
                shape: t.shape().to_vec(),
            },
        );
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let (mpath, wpath) = blob_paths(dir);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    fs::write(&wpath, bytes).map_err(|e| Error::io(&wpath, e))?;
    Ok(())
}

/// Load a blob given its directory or its manifest path.
pub fn read_blob(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let (mpath, wpath) = blob_paths(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("{}: {e}", mpath.display()),
    })?;
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut out = BTreeMap::new();
    for (name, entry) in manifest {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 4;
        if end > bytes.len() {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("tensor {name} needs bytes up to {end}, file has {}", bytes.len()),
            });
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok(out)
}
