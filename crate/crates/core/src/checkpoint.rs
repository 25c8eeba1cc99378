//! Versioned binary tensor container.
//!
//! Layout: the 8-byte magic `MELCKPT1`, a little-endian `u32` header length,
//! a JSON header `{version, kind, dtype, meta, tensors: [{name, shape}]}`,
//! then every tensor's elements in row-major little-endian order. Reloading
//! reproduces each value bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"MELCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<T>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    Ok((header, &body[len..]))
}

/// Reads only the element type of a checkpoint file.
pub fn peek_dtype(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0.dtype)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<T>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut data) = split_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(corrupt(format!(
                "checkpoint holds {} values, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let need = n * T::BYTES;
            if data.len() < need {
                return Err(corrupt(format!("truncated tensor {}", entry.name)));
            }
            let values: Vec<T> = data[..need].chunks_exact(T::BYTES).map(T::read_le).collect();
            data = &data[need..];
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| corrupt(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn into_store(self) -> BTreeMap<String, ArrayD<T>> {
        self.tensors.into_iter().collect()
    }

    pub fn meta_field<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| corrupt(format!("missing meta field {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| corrupt(format!("meta field {key}: {e}")))
    }
}
