//! Binary checkpoint: magic, version, a length-prefixed JSON header naming
//! every parameter, then raw little-endian values in layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelState, ParamKey, Result};
use crate::autograd::{Precision, Real, Tensor};

const MAGIC: &[u8; 8] = b"ULLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    precision: Precision,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    key: ParamKey,
    shape: Vec<usize>,
}

/// A checkpoint loaded at its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

impl AnyModel {
    pub fn into_precision<T: Real>(self) -> ModelState<T> {
        match self {
            AnyModel::F32(m) => m.to_precision(),
            AnyModel::F64(m) => m.to_precision(),
        }
    }
}

pub fn write_checkpoint<T: Real>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        precision: T::PRECISION,
        params: state
            .params()
            .iter()
            .map(|(k, t)| ParamEntry {
                name: k.to_string(),
                key: *k,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + json.len() + state.parameter_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in state.params() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<AnyModel> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| ModelError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let data = &bytes[20 + hlen..];
    match header.precision {
        Precision::F32 => decode::<f32>(header, data).map(AnyModel::F32),
        Precision::F64 => decode::<f64>(header, data).map(AnyModel::F64),
    }
    .map_err(|e| match e {
        ModelError::Checkpoint(m) => bad(&m),
        other => other,
    })
}

fn decode<T: Real>(header: Header, data: &[u8]) -> Result<ModelState<T>> {
    let total: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if data.len() != total * T::BYTES {
        return Err(ModelError::Checkpoint(format!(
            "expected {} bytes of parameters, found {}",
            total * T::BYTES,
            data.len()
        )));
    }
    let mut offset = 0;
    let mut params = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let values = data[offset..offset + n * T::BYTES]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        offset += n * T::BYTES;
        let t =
            Tensor::new(entry.shape, values).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        params.push((entry.key, t));
    }
    ModelState::from_parts(header.config, params, header.step)
}
