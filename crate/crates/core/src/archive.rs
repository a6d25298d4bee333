//! Named tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u64                      header length N
//! N bytes                  UTF-8 JSON header
//! payload                  raw f32 row-major tensor data
//! u64                      FNV-1a (64-bit) of the payload region
//! ```
//!
//! The header is a JSON object mapping each tensor name to
//! `{"dtype":"f32","shape":[..],"offset":o,"length":n}` where `offset` and
//! `length` are byte positions relative to the payload start. The reserved
//! key `__metadata__` holds a string-to-string map. Writers emit keys in
//! sorted order, compact JSON, and payloads packed in name order, so
//! load-then-save reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor<f32>>,
    metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    /// Like [`get`](Self::get) but a missing tensor is a load error naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing tensor `{name}`")))
    }

    /// Requires `name` with an exact shape.
    pub fn require_shape(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self.require(name)?;
        if t.shape() != shape {
            return Err(Error::Load(format!(
                "tensor `{name}`: expected shape {:?}, found {:?}",
                shape,
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        let meta: Map<String, Value> = self
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = (t.len() * 4) as u64;
            let entry = Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
            offset += length;
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let payload_start = out.len();
        for t in self.tensors.values() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let checksum = fnv1a64(&out[payload_start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Archive(msg);
        if bytes.len() < 16 {
            return Err(bad(format!("archive too short ({} bytes)", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|&s| s + 8 <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds archive size {}", bytes.len())))?;
        let payload_end = bytes.len() - 8;
        let payload = &bytes[payload_start..payload_end];
        let stored = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        let actual = fnv1a64(payload);
        if stored != actual {
            return Err(bad(format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}")));
        }

        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| bad(format!("malformed header: {e}")))?;
        let mut archive = TensorArchive::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                let Value::Object(meta) = value else {
                    return Err(bad("metadata must be an object".into()));
                };
                for (k, v) in meta {
                    let Value::String(v) = v else {
                        return Err(bad(format!("metadata value for `{k}` must be a string")));
                    };
                    archive.metadata.insert(k, v);
                }
                continue;
            }
            let entry: Entry =
                serde_json::from_value(value).map_err(|e| bad(format!("entry `{name}`: {e}")))?;
            if entry.dtype != "f32" {
                return Err(bad(format!("entry `{name}`: unsupported dtype {}", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let (start, len) = (entry.offset as usize, entry.length as usize);
            if len != n * 4 || start.checked_add(len).is_none_or(|end| end > payload.len()) {
                return Err(bad(format!(
                    "entry `{name}`: byte range {start}+{len} invalid for shape {:?} and payload {}",
                    entry.shape,
                    payload.len()
                )));
            }
            let data = payload[start..start + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            archive.tensors.insert(name, Tensor::new(entry.shape, data)?);
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Load(format!("cannot read archive {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
