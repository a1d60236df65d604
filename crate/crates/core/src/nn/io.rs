//! Weight files: a JSON manifest next to a little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::NnError;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub dtype: String,
    pub blob: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// `model.json` → `model.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_weights(path: &Path, store: &ParamStore, metadata: serde_json::Value) -> Result<(), NnError> {
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: store.shape(id).to_vec(),
            offset,
        });
        for v in store.value(id) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += store.value(id).len();
    }
    let bin = blob_path(path);
    let manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        blob: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
        metadata,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&bin, &blob)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NnError::WeightFile(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(ParamStore, serde_json::Value), NnError> {
    let text = fs::read_to_string(path)?;
    let m: WeightManifest = serde_json::from_str(&text).map_err(|e| NnError::WeightFile(e.to_string()))?;
    if m.format_version != FORMAT_VERSION || m.dtype != DTYPE {
        return Err(NnError::WeightFile(format!(
            "unsupported format {} / {}",
            m.format_version, m.dtype
        )));
    }
    let bin = path.with_file_name(&m.blob);
    let blob = fs::read(&bin)?;
    if hex::encode(Sha256::digest(&blob)) != m.sha256 {
        return Err(NnError::WeightFile(format!("checksum mismatch for {}", bin.display())));
    }
    if blob.len() % 8 != 0 {
        return Err(NnError::WeightFile("blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut store = ParamStore::new();
    for t in &m.tensors {
        let n: usize = t.shape.iter().product();
        let data = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| NnError::WeightFile(format!("{} runs past the blob", t.name)))?;
        store.add(&t.name, &t.shape, data.to_vec())?;
    }
    Ok((store, m.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        let mut s = ParamStore::new();
        s.add("a", &[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.1, 1e300]).unwrap();
        s.add("b", &[1], vec![-0.0]).unwrap();
        save_weights(&p, &s, serde_json::json!({"seed": 4})).unwrap();
        let (l, meta) = load_weights(&p).unwrap();
        assert_eq!(meta["seed"], 4);
        assert_eq!(l.value(l.id("a").unwrap()), s.value(s.id("a").unwrap()));
        assert_eq!(l.shape(l.id("a").unwrap()), &[2, 3]);

        let mut blob = fs::read(blob_path(&p)).unwrap();
        blob[0] ^= 1;
        fs::write(blob_path(&p), blob).unwrap();
        assert!(matches!(load_weights(&p), Err(NnError::WeightFile(_))));
    }
}
