//! Binary parameter container.
//!
//! Layout: 8-byte magic, `u32` format version (LE), `u64` header length (LE),
//! a JSON header describing metadata and tensor layout, then every tensor's
//! values as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"ALLDEPTH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Shape,
}

/// Named, grouped tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    shape: p.tensor.shape(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len)
            .map_err(|_| Error::Checkpoint("header too large".into()))?;
        let header: Header = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let mut params = ParamStore::new();
        for entry in header.tensors {
            let n = entry.shape.len();
            let raw = cur.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.by_name(&entry.name).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate tensor {}",
                    entry.name
                )));
            }
            params.push(entry.name, entry.group, Tensor::from_vec(entry.shape, data));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensor data",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint {
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Reads a required metadata field.
    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata field {key}")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata field {key}: {e}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated file at byte {}", self.bytes.len()))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Copies every tensor of `src` into the identically named parameter of
/// `dst`, requiring the same names, groups and shapes.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for id in dst.ids().collect::<Vec<_>>() {
        let p = dst.get_mut(id);
        let s = src
            .by_name(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
        if s.group != p.group || s.tensor.shape() != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {} in group {}, expected {} in group {}",
                p.name,
                s.tensor.shape(),
                s.group,
                p.tensor.shape(),
                p.group
            )));
        }
        p.tensor = s.tensor.clone();
    }
    Ok(())
}
