//! Checkpoint container: a directory holding `manifest.json` (tensor name ->
//! shape/dtype/file plus run metadata) and one raw little-endian f32 blob per
//! tensor. The same container is used by the codec, encoder, language-model
//! core and visual decoder. Save(load(x)) is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("blob {file} has {got} bytes, expected {want}")]
    BlobSize { file: String, got: usize, want: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// BTreeMap keeps serialization order stable.
    pub tensors: BTreeMap<String, TensorEntry>,
    pub step: usize,
    /// Echo of the flat config this checkpoint was produced under.
    pub config: BTreeMap<String, String>,
    /// Stateless RNG bookkeeping: base seed and the next step to draw for.
    pub rng: RngState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub step: usize,
    pub config: BTreeMap<String, String>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_store(
        store: &ParamStore,
        step: usize,
        config: BTreeMap<String, String>,
        rng: RngState,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for p in store.iter() {
            tensors.insert(p.name.clone(), p.value.clone());
        }
        Checkpoint { tensors, step, config, rng }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(|e| CheckpointError::Io { path: dir.into(), source: e })?;
        let mut manifest = Manifest {
            tensors: BTreeMap::new(),
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
        };
        for (name, t) in &self.tensors {
            let file = format!("{}.bin", name.replace(['/', ' '], "_"));
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for &v in &t.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            write_atomic(&dir.join(&file), &bytes)?;
            manifest.tensors.insert(
                name.clone(),
                TensorEntry { shape: [t.rows, t.cols], dtype: "f32".into(), file },
            );
        }
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        write_atomic(&dir.join("manifest.json"), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join("manifest.json");
        let bytes =
            fs::read(&mpath).map_err(|e| CheckpointError::Io { path: mpath.clone(), source: e })?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(CheckpointError::Manifest(format!(
                    "tensor {name}: unsupported dtype {}",
                    entry.dtype
                )));
            }
            let bpath = dir.join(&entry.file);
            let raw = fs::read(&bpath)
                .map_err(|e| CheckpointError::Io { path: bpath.clone(), source: e })?;
            let want = entry.shape[0] * entry.shape[1] * 4;
            if raw.len() != want {
                return Err(CheckpointError::BlobSize {
                    file: entry.file.clone(),
                    got: raw.len(),
                    want,
                });
            }
            let mut data = Vec::with_capacity(entry.shape[0] * entry.shape[1]);
            for chunk in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
            }
            tensors.insert(name.clone(), Tensor::from_vec(entry.shape[0], entry.shape[1], data));
        }
        Ok(Checkpoint { tensors, step: manifest.step, config: manifest.config, rng: manifest.rng })
    }

    /// Copy tensor values into an existing store; every store parameter must
    /// be present with a matching shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let t = self.tensors.get(&name).ok_or_else(|| {
                CheckpointError::Manifest(format!("checkpoint missing tensor {name}"))
            })?;
            let id = store.id(&name);
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(CheckpointError::Manifest(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Write to a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CheckpointError::Io { path: dir.into(), source: e })?;
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)
            .map_err(|e| CheckpointError::Io { path: tmp.clone(), source: e })?;
        f.write_all(bytes).map_err(|e| CheckpointError::Io { path: tmp.clone(), source: e })?;
    }
    fs::rename(&tmp, path).map_err(|e| CheckpointError::Io { path: path.into(), source: e })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");

        let mut tensors = BTreeMap::new();
        tensors.insert("m.w".to_string(), Tensor::from_vec(2, 3, vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.75]));
        tensors.insert("m.b".to_string(), Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let mut config = BTreeMap::new();
        config.insert("seed".into(), "7".into());
        let ck = Checkpoint { tensors, step: 42, config, rng: RngState { seed: 7, next_step: 42 } };
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        loaded.save(&b).unwrap();

        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(a.join(&name)).unwrap();
            let y = std::fs::read(b.join(&name)).unwrap();
            assert_eq!(x, y, "file {name:?} differs after round trip");
        }
    }
}
