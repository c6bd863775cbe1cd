//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `SSGCKPT\0`, a little-endian `u32` format version,
//! a `u32` header length, a JSON header (model kind, dtype, free-form model
//! metadata and the ordered tensor names/shapes), then every tensor's data as
//! little-endian scalars in header order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::{ParamStore, Tensor};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SSGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
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

pub fn encode_checkpoint<T: Scalar, M: Serialize>(kind: &str, meta: &M, params: &ParamStore<T>) -> Vec<u8> {
    let header = Header {
        kind: kind.to_owned(),
        dtype: T::DTYPE.to_owned(),
        meta: serde_json::to_value(meta).expect("checkpoint metadata serializes"),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + params.numel() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    out
}

pub fn decode_checkpoint<T: Scalar, M: DeserializeOwned>(
    bytes: &[u8],
    expected_kind: &str,
) -> std::result::Result<(M, ParamStore<T>), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or("truncated header")?;
    let header: Header = serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
    if header.kind != expected_kind {
        return Err(format!("expected a `{expected_kind}` checkpoint, found `{}`", header.kind));
    }
    if header.dtype != T::DTYPE {
        return Err(format!("stored as {}, requested {}", header.dtype, T::DTYPE));
    }
    let meta: M = serde_json::from_value(header.meta).map_err(|e| format!("bad metadata: {e}"))?;
    let width = std::mem::size_of::<T>();
    let mut offset = 16 + hlen;
    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let chunk = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| format!("tensor `{}` is truncated", entry.name))?;
        let data = T::from_le_bytes_slice(chunk).ok_or("misaligned tensor data")?;
        tensors.push(Tensor::new(entry.shape, data));
        names.push(entry.name);
        offset += n * width;
    }
    if offset != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - offset));
    }
    Ok((meta, ParamStore::from_parts(names, tensors)))
}

pub fn save_checkpoint<T: Scalar, M: Serialize>(path: &Path, kind: &str, meta: &M, params: &ParamStore<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, encode_checkpoint(kind, meta, params)).at(path)
}

pub fn load_checkpoint<T: Scalar, M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, ParamStore<T>)> {
    let bytes = fs::read(path).at(path)?;
    decode_checkpoint(&bytes, kind).map_err(|reason| Error::Checkpoint {
        path: path.to_owned(),
        reason,
    })
}

/// Fails unless `params` has exactly the names and shapes of `reference`.
pub(crate) fn check_layout<T: Scalar>(params: &ParamStore<T>, reference: &ParamStore<T>) -> std::result::Result<(), String> {
    if params.names() != reference.names() {
        return Err("parameter names do not match the architecture".into());
    }
    for (a, b) in params.tensors().iter().zip(reference.tensors()) {
        if a.shape() != b.shape() {
            return Err(format!("parameter shape {:?} does not match {:?}", a.shape(), b.shape()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]));
        p.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode_checkpoint("toy", &serde_json::json!({"k": 3}), &store());
        let (meta, back): (serde_json::Value, ParamStore<f32>) = decode_checkpoint(&bytes, "toy").unwrap();
        assert_eq!(meta["k"], 3);
        assert_eq!(back, store());
    }

    #[test]
    fn rejects_wrong_kind_dtype_and_truncation() {
        let bytes = encode_checkpoint("toy", &(), &store());
        assert!(decode_checkpoint::<f32, ()>(&bytes, "other").is_err());
        assert!(decode_checkpoint::<f64, ()>(&bytes, "toy").is_err());
        assert!(decode_checkpoint::<f32, ()>(&bytes[..bytes.len() - 1], "toy").is_err());
        assert!(decode_checkpoint::<f32, ()>(b"garbage", "toy").is_err());
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(decode_checkpoint::<f32, ()>(&bumped, "toy").unwrap_err().contains("version"));
    }
}
