//! Named-tensor archive.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, a JSON
//! manifest (dtype, per-tensor name/shape/offset, free-form metadata), then
//! the concatenated little-endian payloads. Offsets are relative to the
//! payload start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorops::Tensor4;

pub const MAGIC: &[u8; 8] = b"SEAFLOW\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<Entry>,
    meta: Value,
}

fn width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

/// Serialize tensors at the precision of `T`.
/// Tensors with their archive names, in archive order.
pub type Named<T> = Vec<(String, Tensor4<T>)>;

pub fn encode<T: Scalar>(tensors: &[(String, &Tensor4<T>)], meta: &Value) -> Vec<u8> {
    let bytes = width(T::NAME).expect("scalar width");
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape(),
                offset,
            };
            offset += (t.len() * bytes) as u64;
            e
        })
        .collect();
    let manifest = Manifest {
        dtype: T::NAME.into(),
        tensors: entries,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            if bytes == 4 {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
    }
    out
}

/// Inverse of [`encode`]; payloads are converted to `T` if stored at a
/// different precision.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Value, Named<T>)> {
    let format = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    let corrupt = |reason: String| Error::Corrupt {
        path: path.into(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format("missing archive magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format(format!("unsupported archive version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(len))
        .ok_or_else(|| corrupt("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let w = width(&manifest.dtype).ok_or_else(|| format(format!("dtype {}", manifest.dtype)))?;
    let payload = &bytes[20 + len..];
    let mut expected = 0usize;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.offset as usize != expected {
            return Err(corrupt(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        let end = expected + count * w;
        let raw = payload
            .get(expected..end)
            .ok_or_else(|| corrupt(format!("payload of {} truncated", e.name)))?;
        let data = raw
            .chunks_exact(w)
            .map(|c| {
                T::of(if w == 4 {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                })
            })
            .collect();
        out.push((e.name.clone(), Tensor4::from_vec(e.shape, data)?));
        expected = end;
    }
    if expected != payload.len() {
        return Err(corrupt(format!("{} trailing payload bytes", payload.len() - expected)));
    }
    Ok((manifest.meta, out))
}

pub fn save<T: Scalar>(path: &Path, tensors: &[(String, &Tensor4<T>)], meta: &Value) -> Result<()> {
    fs::write(path, encode(tensors, meta)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Value, Named<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
