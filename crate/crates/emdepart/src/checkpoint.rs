//! Checkpoint file: an 8-byte little-endian header length, a JSON header,
//! then a little-endian float blob.
//!
//! The header names every tensor (model parameters, then the optimizer's
//! first and second moments as `adam.m.<name>` / `adam.v.<name>`) with its
//! shape and byte offset into the blob. `dtype` is `f64` unless the file
//! was written compact (`f32`), in which case resuming is no longer
//! bit-exact.

use std::fs;
use std::path::Path;

use emdepart_core::config::ExperimentConfig;
use emdepart_core::trainer::{Adam, Checkpoint, EpochMetrics, NamedTensor, RngState};
use emdepart_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: Dtype,
    config: ExperimentConfig,
    r0: usize,
    word_dim: usize,
    epoch: usize,
    adam: AdamHeader,
    rng: RngState,
    log: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(ckpt: &Checkpoint, dtype: Dtype) -> Vec<u8> {
    let names: Vec<&str> = ckpt.params.iter().map(|p| p.name.as_str()).collect();
    let mut all: Vec<(String, &Tensor)> = ckpt.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    for (prefix, moments) in [("adam.m", &ckpt.adam.m), ("adam.v", &ckpt.adam.v)] {
        all.extend(names.iter().zip(moments).map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(all.len());
    for (name, t) in all {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            match dtype {
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let header = Header {
        dtype,
        config: ckpt.config.clone(),
        r0: ckpt.r0,
        word_dim: ckpt.word_dim,
        epoch: ckpt.epoch,
        adam: AdamHeader {
            beta1: ckpt.adam.beta1,
            beta2: ckpt.adam.beta2,
            eps: ckpt.adam.eps,
            step: ckpt.adam.step,
        },
        rng: ckpt.rng.clone(),
        log: ckpt.log.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| CliError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("file shorter than its header length".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|e| bad(e.to_string()))?;
    let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let blob = &bytes[8 + len..];
    let width = header.dtype.width();

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut end = 0;
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        let span = blob
            .get(e.offset..e.offset + count * width)
            .ok_or_else(|| bad(format!("tensor {} runs past the end of the blob", e.name)))?;
        end = end.max(e.offset + count * width);
        let data: Vec<f64> = match header.dtype {
            Dtype::F64 => span.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => span
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor {} has non-finite values", e.name)));
        }
        tensors.push(NamedTensor {
            name: e.name.clone(),
            value: Tensor::new(&e.shape, data)?,
        });
    }
    if end != blob.len() {
        return Err(bad(format!("blob has {} bytes, tensors cover {end}", blob.len())));
    }
    if tensors.len() % 3 != 0 {
        return Err(bad("expected parameters followed by both Adam moments".into()));
    }
    let n = tensors.len() / 3;
    let v: Vec<NamedTensor> = tensors.split_off(2 * n);
    let m: Vec<NamedTensor> = tensors.split_off(n);
    let params = tensors;
    for (prefix, moments) in [("adam.m", &m), ("adam.v", &v)] {
        for (p, t) in params.iter().zip(moments) {
            if t.name != format!("{prefix}.{}", p.name) || t.value.shape() != p.value.shape() {
                return Err(bad(format!("{} does not match parameter {}", t.name, p.name)));
            }
        }
    }
    Ok(Checkpoint {
        config: header.config,
        r0: header.r0,
        word_dim: header.word_dim,
        epoch: header.epoch,
        params,
        adam: Adam {
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
            step: header.adam.step,
            m: m.into_iter().map(|t| t.value).collect(),
            v: v.into_iter().map(|t| t.value).collect(),
        },
        rng: header.rng,
        log: header.log,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint, dtype: Dtype) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, to_bytes(ckpt, dtype)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes, path)
}
