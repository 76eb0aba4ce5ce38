//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `FIRECKPT`, a little-endian `u64` header length,
//! the JSON header, then the payload of concatenated little-endian `f32`
//! buffers. The header is
//! `{format_version, config, tensors: {name: {dtype, shape, byte_offset, byte_len}}}`
//! with offsets relative to the payload start.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorops::Tensor;

pub const MAGIC: &[u8; 8] = b"FIRECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Checkpoint {
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.len() * 4) as u64;
            index.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                    byte_len: len,
                },
            );
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..start])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[start..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor `{name}` has unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.byte_len != (n * 4) as u64 {
                return Err(bad(format!("tensor `{name}`: byte_len does not match shape")));
            }
            let end = e.byte_offset.checked_add(e.byte_len).filter(|&x| x <= payload.len() as u64);
            let end = end.ok_or_else(|| bad(format!("tensor `{name}` lies outside the payload")))? as usize;
            let raw = &payload[e.byte_offset as usize..end];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(e.shape, data)?);
        }
        Ok(Checkpoint {
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// The `kind` string stored in the config, if any.
    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(|k| k.as_str())
    }
}
