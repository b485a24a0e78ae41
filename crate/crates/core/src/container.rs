//! Checkpoint container: `<name>.json` index plus `<name>.bin` holding every
//! tensor as little-endian f32, concatenated in traversal order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ToyModel};
use crate::params::Module;

pub const FORMAT: &str = "decodet-f32-le-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub blob: String,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn checkpoint_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.json")),
        dir.join(format!("{name}.bin")),
    )
}

/// Index and blob bytes for `model`.
pub fn encode(model: &ToyModel, blob_name: &str) -> (CheckpointIndex, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = BTreeMap::new();
    for p in model.param_list() {
        tensors.insert(
            p.name,
            TensorEntry {
                shape: p.shape,
                dtype: "f32".into(),
                offset: blob.len(),
                trainable: p.trainable,
            },
        );
        for &v in p.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        format: FORMAT.into(),
        blob: blob_name.into(),
        config: model.config.clone(),
        tensors,
    };
    (index, blob)
}

pub fn save(model: &ToyModel, dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json_path, bin_path) = checkpoint_paths(dir, name);
    let (index, blob) = encode(model, &format!("{name}.bin"));
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))
}

pub fn load_index(json_path: &Path) -> Result<CheckpointIndex> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|e| Error::json(json_path, e))?;
    if index.format != FORMAT {
        return Err(Error::format(
            json_path,
            format!("unsupported container format {:?}", index.format),
        ));
    }
    Ok(index)
}

/// Loads a checkpoint from its `.json` index path.
pub fn load(json_path: &Path) -> Result<ToyModel> {
    let index = load_index(json_path)?;
    let bin_path = json_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&index.blob);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut model = ToyModel::new(index.config.clone(), 0)?;
    let mut seen = 0;
    for p in model.param_list_mut() {
        let entry = index
            .tensors
            .get(&p.name)
            .ok_or_else(|| Error::format(json_path, format!("missing tensor {}", p.name)))?;
        if entry.shape != p.shape || entry.dtype != "f32" {
            return Err(Error::format(
                json_path,
                format!(
                    "tensor {}: expected f32 {:?}, found {} {:?}",
                    p.name, p.shape, entry.dtype, entry.shape
                ),
            ));
        }
        let end = entry.offset + 4 * p.data.len();
        let bytes = blob.get(entry.offset..end).ok_or_else(|| {
            Error::format(
                &bin_path,
                format!("tensor {} runs past end of blob", p.name),
            )
        })?;
        for (dst, chunk) in p.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
        seen += 1;
    }
    if seen != index.tensors.len() {
        return Err(Error::format(
            json_path,
            "index lists tensors the model does not have",
        ));
    }
    Ok(model)
}

/// Blob bytes of every tensor whose name starts with `prefix`, keyed by name.
pub fn tensor_bytes(json_path: &Path, prefix: &str) -> Result<BTreeMap<String, Vec<u8>>> {
    let index = load_index(json_path)?;
    let bin_path = json_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&index.blob);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut out = BTreeMap::new();
    for (name, e) in index.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let len = 4 * e.shape.iter().product::<usize>();
        let bytes = blob.get(e.offset..e.offset + len).ok_or_else(|| {
            Error::format(&bin_path, format!("tensor {name} runs past end of blob"))
        })?;
        out.insert(name.clone(), bytes.to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::new(ModelConfig::default(), 3).unwrap();
        save(&m, dir.path(), "a").unwrap();
        let loaded = load(&dir.path().join("a.json")).unwrap();
        save(&loaded, dir.path(), "b").unwrap();
        let a = fs::read(dir.path().join("a.bin")).unwrap();
        let b = fs::read(dir.path().join("b.bin")).unwrap();
        assert_eq!(a, b);
        for (p, q) in m.param_list().iter().zip(loaded.param_list()) {
            for (x, y) in p.data.iter().zip(q.data) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::new(ModelConfig::default(), 3).unwrap();
        save(&m, dir.path(), "a").unwrap();
        let bin = dir.path().join("a.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(&dir.path().join("a.json")).is_err());
    }
}
