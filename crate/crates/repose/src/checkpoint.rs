//! Versioned named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"RPCK"
//! version u32      currently 1
//! mlen    u32      manifest byte length
//! manifest JSON    {"meta": {..}, "tensors": [{"name", "shape", "offset", "len"}]}
//! data             concatenated f64 payloads, offsets in elements
//! ```
//!
//! The manifest is ordinary JSON so checkpoints can be inspected with
//! `head -c` and `python -c "..."` without this crate. Writes go through a
//! temp file and an atomic rename.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Default, Clone)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e: std::io::Error| CheckpointError::Io { path: path.display().to_string(), source: e };
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
            });
            offset += t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest { meta: self.meta.clone(), tensors: entries })
            .expect("manifest serializes");
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(MAGIC).map_err(io)?;
            f.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            f.write_all(&(manifest.len() as u32).to_le_bytes()).map_err(io)?;
            f.write_all(&manifest).map_err(io)?;
            let mut buf = Vec::with_capacity(8 * 1024);
            for t in self.tensors.values() {
                buf.clear();
                for &v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                f.write_all(&buf).map_err(io)?;
            }
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let io = |e: std::io::Error| CheckpointError::Io { path: path.display().to_string(), source: e };
        let mut f = std::fs::File::open(path).map_err(io)?;
        let mut head = [0u8; 12];
        f.read_exact(&mut head).map_err(io)?;
        if &head[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mlen = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut mbuf = vec![0u8; mlen];
        f.read_exact(&mut mbuf).map_err(io)?;
        let manifest: Manifest =
            serde_json::from_slice(&mbuf).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut data = Vec::new();
        f.read_to_end(&mut data).map_err(io)?;
        if data.len() % 8 != 0 {
            return Err(CheckpointError::Corrupt("payload not a multiple of 8 bytes".into()));
        }
        let total = data.len() / 8;
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let count: usize = e.shape.iter().product();
            if count as u64 != e.len {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {}: shape {:?} disagrees with len {}",
                    e.name, e.shape, e.len
                )));
            }
            let start = e.offset as usize;
            let end = start + count;
            if end > total {
                return Err(CheckpointError::Corrupt(format!("tensor {} overruns payload", e.name)));
            }
            let values: Vec<f64> = data[start * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Corrupt(format!("tensor {} has non-finite values", e.name)));
            }
            tensors.insert(e.name, Tensor::from_vec(&e.shape, values));
        }
        Ok(Checkpoint { meta: manifest.meta, tensors })
    }
}
