//! Binary checkpoints: magic line, length-prefixed JSON header, then little-endian
//! f64 parameters followed by the AdamW first and second moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::nn::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"TRITEMP-CKPT v1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}: not a checkpoint (bad magic)")]
    Magic(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint body is truncated")]
    Truncated,
    #[error("parameter {name}: checkpoint has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("checkpoint has {found} parameters, model has {expected}")]
    ParamCount { found: usize, expected: usize },
}

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub train_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    step: usize,
    history: Vec<EpochRecord>,
    adam: AdamWConfig,
    adam_step: u64,
    params: Vec<ParamMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        store: &ParamStore,
        optimizer: &AdamW,
        epoch: usize,
        step: usize,
        history: &[EpochRecord],
    ) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            epoch,
            step,
            history: history.to_vec(),
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            history: self.history.clone(),
            adam: self.optimizer.config.clone(),
            adam_step: self.optimizer.step,
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, CheckpointError> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| CheckpointError::Magic(origin.into()))?;
        let mut r = rest;
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| CheckpointError::Truncated)?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        let mut body = &r[len..];
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor, CheckpointError> {
            let n: usize = shape.iter().product();
            if body.len() < n * 8 {
                return Err(CheckpointError::Truncated);
            }
            let data = body[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            body = &body[n * 8..];
            Ok(Tensor::new(shape, data))
        };
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            params.push((p.name.clone(), read_tensor(&p.shape)?));
        }
        let mut m = Vec::with_capacity(params.len());
        for p in &header.params {
            m.push(read_tensor(&p.shape)?);
        }
        let mut v = Vec::with_capacity(params.len());
        for p in &header.params {
            v.push(read_tensor(&p.shape)?);
        }
        Ok(Self {
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            step: header.step,
            history: header.history,
            params,
            optimizer: AdamW {
                config: header.adam,
                step: header.adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Copies the stored parameters into `store`, matching by name.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::ParamCount {
                found: self.params.len(),
                expected: store.len(),
            });
        }
        for (name, t) in &self.params {
            let id = store.find(name).ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            let cur = store.get_mut(id);
            if cur.shape() != t.shape() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: cur.shape().to_vec(),
                });
            }
            *cur = t.clone();
        }
        Ok(())
    }
}
