//! Self-describing checkpoint archive.
//!
//! Layout: 8-byte magic `STRKCKP1`, u64 little-endian header length, UTF-8
//! JSON header (model config, dtype, training state, tensor index), then the
//! raw little-endian parameter bytes in index order.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::config::ModelConfig;
use super::model::SegModel;
use super::params::Group;
use crate::error::{write_atomic, Error, IoContext, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STRKCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    dtype: String,
    train_state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::InvalidModelConfig(format!(
            "unsupported parameter dtype {other:?}"
        ))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        _ => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}

/// Serializes the model with an arbitrary JSON training state.
pub fn save_checkpoint(model: &SegModel, train_state: &serde_json::Value, path: &Path) -> Result<()> {
    let dtype = dtype_name(model.dtype())?;
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let bytes = tensor_bytes(p.var.as_tensor())?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.var.dims().to_vec(),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        model_config: model.config().clone(),
        dtype: dtype.to_string(),
        train_state: train_state.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).at(path)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    write_atomic(path, &out)
}

/// Rebuilds the model stored at `path` and returns it with its training state.
pub fn load_checkpoint(path: &Path) -> Result<(SegModel, serde_json::Value)> {
    let bytes = std::fs::read(path).at(path)?;
    let corrupt = |offset: usize, reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(0, "bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(8, format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| corrupt(16, format!("header: {e}")))?;
    let dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(corrupt(16, format!("unknown dtype {other}"))),
    };
    let model = SegModel::with_dtype(&header.model_config, dtype)?;
    if model.params().len() != header.tensors.len() {
        return Err(corrupt(
            16,
            format!(
                "{} tensors stored, model has {}",
                header.tensors.len(),
                model.params().len()
            ),
        ));
    }
    let payload = &bytes[body..];
    for (p, e) in model.params().iter().zip(&header.tensors) {
        if p.name != e.name || p.var.dims() != e.shape.as_slice() {
            return Err(corrupt(
                16,
                format!("tensor {} {:?} does not match model {} {:?}", e.name, e.shape, p.name, p.var.dims()),
            ));
        }
        let start = e.offset as usize;
        let end = start + e.len as usize;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| corrupt(body + start, format!("tensor {} truncated", e.name)))?;
        let t = match dtype {
            DType::F64 => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), model.device())?
            }
            _ => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), model.device())?
            }
        };
        if t.elem_count() != p.elem_count() {
            return Err(corrupt(body + start, format!("tensor {} has wrong length", e.name)));
        }
        p.var.set(&t)?;
    }
    Ok((model, header.train_state))
}
