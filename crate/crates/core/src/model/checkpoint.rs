//! Versioned checkpoint container.
//!
//! Layout: the magic line `TTTSE-CKPT-v1\n`, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order. The header echoes the model configuration, carries free-form
//! metadata (normalization, diffusion schedule, trainer state) and indexes
//! tensors by hierarchical name.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"TTTSE-CKPT-v1\n";

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: TensorMap,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> TensorMap {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_section(&mut self, prefix: &str, tensors: TensorMap) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}/{k}"), v);
        }
    }

    pub fn meta_value<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.meta
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value)
            .map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, (shape, data))| {
                    if shape.iter().product::<usize>() != data.len() {
                        return Err(Error::Checkpoint(format!("tensor `{name}` shape/data mismatch")));
                    }
                    Ok(TensorEntry {
                        name: name.clone(),
                        shape: shape.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n: usize = self.tensors.values().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.tensors.values() {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::Checkpoint("missing TTTSE-CKPT-v1 magic".into()))?;
        if rest.len() < 8 {
            return Err(Error::Checkpoint("truncated header length".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut data = &rest[len..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 4 * n {
                return Err(Error::Checkpoint(format!("tensor `{}` truncated", entry.name)));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[4 * n..];
            tensors.insert(entry.name, (entry.shape, values));
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            model: header.model,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
