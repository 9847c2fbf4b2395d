//! Self-describing parameter container.
//!
//! Byte layout (all integers little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 0..4         | magic `JPCK`                                         |
//! | 4..8         | `u32` format version (currently 1)                   |
//! | 8..16        | `u64` header length `n` in bytes                     |
//! | 16..16+n     | UTF-8 JSON header                                    |
//! | 16+n..       | `f64` payload, arrays concatenated in header order   |
//!
//! The header is `{"metadata": <any JSON>, "arrays": [{"name", "shape",
//! "offset"}]}` where `offset` counts `f64` elements from the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"JPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: serde_json::Value) -> Self {
        let arrays = store
            .ids()
            .map(|id| NamedArray {
                name: store.name(id).to_string(),
                shape: store.shape(id).to_vec(),
                data: store.value(id).to_vec(),
            })
            .collect();
        Checkpoint { metadata, arrays }
    }

    /// Copies every array into `store`; names and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, model expects {}",
                self.arrays.len(),
                store.len()
            )));
        }
        for a in &self.arrays {
            store.assign(&a.name, &a.shape, a.data.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry { name: a.name.clone(), shape: a.shape.clone(), offset };
                offset += a.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { metadata: self.metadata.clone(), arrays: entries })
            .expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arrays = header
            .arrays
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = floats
                    .get(e.offset..e.offset + n)
                    .ok_or_else(|| Error::Checkpoint(format!("array {} out of range", e.name)))?
                    .to_vec();
                Ok(NamedArray { name: e.name, shape: e.shape, data })
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint { metadata: header.metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
