//! Checkpoints: a JSON manifest of parameter names/shapes plus one
//! little-endian f64 blob per tensor, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Write `{prefix}.manifest.json` and `{prefix}.bin`. Round-trips bit-exactly.
pub fn save_checkpoint(store: &ParamStore, prefix: &Path) -> Result<()> {
    let manifest = Manifest {
        params: store
            .names()
            .map(|n| {
                let t = store.get(n);
                ManifestEntry {
                    name: n.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                }
            })
            .collect(),
    };
    let mpath = manifest_path(prefix);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(|e| Error::io(mpath.display().to_string(), e))?;

    let mut blob = Vec::new();
    for entry in &manifest.params {
        for &v in store.get(&entry.name).data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bpath = blob_path(prefix);
    fs::write(&bpath, blob).map_err(|e| Error::io(bpath.display().to_string(), e))?;
    Ok(())
}

/// Read a checkpoint back into a fresh store (grads and moments zeroed).
pub fn load_checkpoint(prefix: &Path) -> Result<ParamStore> {
    let mpath = manifest_path(prefix);
    let json = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::MissingRunArtifacts(format!("bad manifest {}: {e}", mpath.display())))?;
    let bpath = blob_path(prefix);
    let blob = fs::read(&bpath).map_err(|e| Error::io(bpath.display().to_string(), e))?;

    let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols * 8).sum();
    if blob.len() != expected {
        return Err(Error::MissingRunArtifacts(format!(
            "blob {} has {} bytes, manifest expects {}",
            bpath.display(),
            blob.len(),
            expected
        )));
    }

    let mut store = ParamStore::new();
    let mut offset = 0;
    for entry in &manifest.params {
        let count = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(count);
        for k in 0..count {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&blob[offset + k * 8..offset + k * 8 + 8]);
            data.push(f64::from_le_bytes(raw));
        }
        offset += count * 8;
        store.insert(&entry.name, Tensor2::from_vec(entry.rows, entry.cols, data));
    }
    Ok(store)
}

fn manifest_path(prefix: &Path) -> std::path::PathBuf {
    with_suffix(prefix, ".manifest.json")
}

fn blob_path(prefix: &Path) -> std::path::PathBuf {
    with_suffix(prefix, ".bin")
}

fn with_suffix(prefix: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}
