//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MWT3" | version u32 | header_len u64 | payload_len u64
//! header (JSON, header_len bytes)
//! payload (raw tensor data, payload_len bytes)
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! The header holds the model config, the optional run config text, the
//! optimizer hyperparameters and step, and a directory of every tensor
//! (name, dtype, shape, byte offset into the payload).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{init_params, MultiwayConfig, MultiwayModel, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};
use crate::training::{AdamW, OptimizerState};

pub const MAGIC: &[u8; 4] = b"MWT3";
pub const FORMAT_VERSION: u32 = 1;

const PRELUDE_LEN: usize = 4 + 4 + 8 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("format error: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: need {needed} bytes, have {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("checksum mismatch: payload is corrupt")]
    Checksum,
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint stores {found:?} tensors, expected {expected:?}")]
    DType { found: DType, expected: DType },
    #[error("incompatible tensor {name}: checkpoint has {found:?}, config expects {expected:?}")]
    Incompatible {
        name: String,
        found: Option<Vec<usize>>,
        expected: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    hyper: AdamW,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    model: MultiwayConfig,
    run_config: Option<String>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<Entry>,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: MultiwayModel<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// Resolved run configuration text, stored verbatim.
    pub run_config: Option<String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.model.config == other.model.config
            && self.model.params.bit_eq(&other.model.params)
            && self.run_config == other.run_config
            && match (&self.optimizer, &other.optimizer) {
                (None, None) => true,
                (Some(a), Some(b)) => a.bit_eq(b),
                _ => false,
            }
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    CheckpointError::Format(msg.into()).into()
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes<T: Scalar>(
    model: &MultiwayModel<T>,
    optimizer: Option<&OptimizerState<T>>,
    run_config: Option<&str>,
) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<T>)> = model.params.iter().map(|(n, t)| (format!("param.{n}"), t)).collect();
    if let Some(opt) = optimizer {
        tensors.extend(opt.m.iter().map(|(n, t)| (format!("opt.m.{n}"), t)));
        tensors.extend(opt.v.iter().map(|(n, t)| (format!("opt.v.{n}"), t)));
    }
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        dtype: T::DTYPE,
        model: model.config.clone(),
        run_config: run_config.map(str::to_string),
        optimizer: optimizer.map(|o| OptimizerHeader {
            hyper: o.hyper,
            step: o.step,
        }),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
    let mut out = Vec::with_capacity(PRELUDE_LEN + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses checkpoint bytes, validating magic, version, length and checksum
/// before anything else is read.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { needed: 4, actual }.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < PRELUDE_LEN {
        return Err(CheckpointError::Truncated {
            needed: PRELUDE_LEN as u64,
            actual,
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let (header_len, payload_len) = (u64_at(bytes, 8), u64_at(bytes, 16));
    let needed = (PRELUDE_LEN as u64)
        .checked_add(header_len)
        .and_then(|n| n.checked_add(payload_len))
        .and_then(|n| n.checked_add(DIGEST_LEN as u64))
        .ok_or_else(|| format_err("section lengths overflow"))?;
    if actual < needed {
        return Err(CheckpointError::Truncated { needed, actual }.into());
    }
    if actual > needed {
        return Err(format_err(format!("{} trailing bytes", actual - needed)));
    }
    let body = bytes.len() - DIGEST_LEN;
    if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
        return Err(CheckpointError::Checksum.into());
    }
    let header_end = PRELUDE_LEN + header_len as usize;
    let header: Header =
        serde_json::from_slice(&bytes[PRELUDE_LEN..header_end]).map_err(|e| format_err(format!("header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::DType {
            found: header.dtype,
            expected: T::DTYPE,
        }
        .into());
    }
    header.model.validate()?;
    let payload = &bytes[header_end..body];

    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != T::DTYPE {
            return Err(format_err(format!("tensor {} has dtype {:?}", e.name, e.dtype)));
        }
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(format!("tensor {} shape overflows", e.name)))?;
        let size = T::DTYPE.size();
        let start = usize::try_from(e.offset).map_err(|_| format_err("offset overflows"))?;
        let end = n
            .checked_mul(size)
            .and_then(|b| b.checked_add(start))
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| format_err(format!("tensor {} lies outside the payload", e.name)))?;
        let data: Vec<T> = payload[start..end].chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if let Some(name) = e.name.strip_prefix("param.") {
            params.insert(name, t);
        } else if let Some(name) = e.name.strip_prefix("opt.m.") {
            m.insert(name.to_string(), t);
        } else if let Some(name) = e.name.strip_prefix("opt.v.") {
            v.insert(name.to_string(), t);
        } else {
            return Err(format_err(format!("unknown tensor section in {}", e.name)));
        }
    }
    let optimizer = match header.optimizer {
        Some(o) => Some(OptimizerState {
            hyper: o.hyper,
            step: o.step,
            m,
            v,
        }),
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(format_err("optimizer moments without optimizer header")),
    };
    Ok(Checkpoint {
        model: MultiwayModel {
            config: header.model,
            params,
        },
        optimizer,
        run_config: header.run_config,
    })
}

/// Writes a checkpoint to `path` through a temporary file in the same directory.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &MultiwayModel<T>,
    optimizer: Option<&OptimizerState<T>>,
    run_config: Option<&str>,
) -> Result<()> {
    let bytes = to_bytes(model, optimizer, run_config)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Checks that every backbone tensor of `params` has the shape a model built
/// from `config` would have, naming the first tensor that differs. Tensors
/// the config does not produce (task heads) are ignored.
pub fn check_compatible<T: Scalar>(config: &MultiwayConfig, params: &ParamStore<T>) -> Result<()> {
    let expected: ParamStore<T> = init_params(config, 0)?;
    for (name, t) in expected.iter() {
        let found = params.get(name).ok().map(|p| p.shape().to_vec());
        if found.as_deref() != Some(t.shape()) {
            return Err(CheckpointError::Incompatible {
                name: name.clone(),
                found,
                expected: Some(t.shape().to_vec()),
            }
            .into());
        }
    }
    Ok(())
}
