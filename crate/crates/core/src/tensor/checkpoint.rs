//! Checkpoint directory: `manifest.json` (ordered `{name, shape, dtype}` list)
//! plus `weights.bin` (little-endian f32 payload in manifest order).

use super::{numel, ParamStore, Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest: Vec<CheckpointEntry> = store
        .iter()
        .map(|p| CheckpointEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), dtype: "f32".into() })
        .collect();
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    let mut bytes = Vec::with_capacity(store.num_values() * 4);
    for p in store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    Ok(())
}

/// Reads a checkpoint directory into `(entry, tensor)` pairs in manifest order.
pub fn load_checkpoint(dir: &Path) -> Result<Vec<(CheckpointEntry, Tensor<f32>)>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Vec<CheckpointEntry> =
        serde_json::from_str(&text).map_err(|e| TensorError::Checkpoint(format!("{MANIFEST_FILE}: {e}")))?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    let total: usize = manifest.iter().map(|e| numel(&e.shape)).sum();
    if bytes.len() != total * 4 {
        return Err(TensorError::Checkpoint(format!(
            "{WEIGHTS_FILE} holds {} bytes, manifest describes {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut out = Vec::with_capacity(manifest.len());
    let mut off = 0;
    for e in manifest {
        if e.dtype != "f32" {
            return Err(TensorError::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n = numel(&e.shape);
        let data = bytes[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += 4 * n;
        let t = Tensor::new(e.shape.clone(), data)?;
        out.push((e, t));
    }
    Ok(out)
}

impl ParamStore {
    /// Replaces every value from a checkpoint whose manifest must list exactly
    /// this store's names and shapes, in order.
    pub fn load_values(&mut self, dir: &Path) -> Result<()> {
        let entries = load_checkpoint(dir)?;
        if entries.len() != self.len() {
            return Err(TensorError::Checkpoint(format!(
                "manifest lists {} tensors, model has {}",
                entries.len(),
                self.len()
            )));
        }
        for (p, (e, t)) in self.iter_mut().zip(entries) {
            if p.name != e.name || p.value.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "incompatible entry {} {:?}; model expects {} {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// SHA-256 hex digest of a checkpoint's weights file.
pub fn weights_digest(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        s.add("a.b", Tensor::new(vec![3], vec![0.5, 0.25, -0.125]).unwrap());
        save_checkpoint(&s, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(manifest.contains("\"dtype\": \"f32\""));
        assert_eq!(fs::read(dir.path().join(WEIGHTS_FILE)).unwrap().len(), 28);

        let mut t = ParamStore::new();
        t.add("a.w", Tensor::zeros(&[2, 2]));
        t.add("a.b", Tensor::zeros(&[3]));
        t.load_values(dir.path()).unwrap();
        assert_eq!(t.get(crate::tensor::ParamId(0)).value.data(), &[1.0, -2.5, 3.25, 0.0]);

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(&[4]));
        wrong.add("a.b", Tensor::zeros(&[3]));
        assert!(wrong.load_values(dir.path()).is_err());
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[4]));
        save_checkpoint(&s, dir.path()).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 6]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(TensorError::Checkpoint(_))));
    }
}
