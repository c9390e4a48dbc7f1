//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic, version `u32`, dtype byte (4 or 8), config
//! JSON (`u32` length + bytes), completed epochs `u64`, Adam step `u64`,
//! tensor count `u32`, then per tensor its name (`u16` length + bytes), rank
//! (`u8`), extents (`u32` each) and values; then every Adam first moment,
//! then every second moment, shaped like the parameters. A SHA-256 of all
//! preceding bytes closes the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{AdamState, TrainConfig, Trainer};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::real::{Precision, Real};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAPSIBCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {found:?} values, expected {expected:?}")]
    Precision { found: Precision, expected: Precision },
    #[error("checkpoint does not match the configuration: {0}")]
    ConfigMismatch(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

/// Everything needed to resume training bit-exactly. The shuffle order is a
/// pure function of (seed, epoch), so the epoch counter is the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values<T: Real>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let w = T::PRECISION.byte_width();
        let raw = self.take(numel(shape).checked_mul(w).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
        Ok(Tensor::new(shape.to_vec(), raw.chunks(w).map(T::read_le).collect()))
    }
}

fn put_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        Checkpoint {
            model: trainer.model().config().clone(),
            train: trainer.config().clone(),
            epoch: trainer.epoch(),
            params: trainer.params().clone(),
            adam: trainer.adam().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::PRECISION.byte_width() as u8);
        let echo = ConfigEcho { model: self.model.clone(), train: self.train.clone() };
        let json = serde_json::to_vec(&echo).expect("configs serialise");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_values(&mut out, t);
        }
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_values(&mut out, t);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let precision = peek_precision(bytes)?;
        if precision != T::PRECISION {
            return Err(CheckpointError::Precision { found: precision, expected: T::PRECISION });
        }
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        let mut r = Reader { bytes: body, pos: CHECKPOINT_MAGIC.len() + 4 + 1 };
        let json_len = r.u32()? as usize;
        let echo: ConfigEcho = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let epoch = r.u64()? as usize;
        let t = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let values = r.values(&shape)?;
            params.push(name, values);
        }
        let shapes: Vec<Vec<usize>> = params.values().iter().map(|v| v.shape().to_vec()).collect();
        let m = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { model: echo.model, train: echo.train, epoch, params, adam: AdamState { t, m, v } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }

    /// A trainer continuing from this state.
    pub fn into_trainer(self) -> std::result::Result<Trainer<T>, super::TrainError> {
        let model = Model::build(self.model)?;
        if !self.params.matches(model.specs()) {
            return Err(CheckpointError::ConfigMismatch("parameter names or shapes differ from the model".into()).into());
        }
        Ok(Trainer::from_parts(model, self.train, self.params, self.adam, self.epoch))
    }

    /// Like [`Checkpoint::into_trainer`], but refuses a checkpoint written
    /// for a different architecture.
    pub fn resume(self, expected: &ModelConfig) -> std::result::Result<Trainer<T>, super::TrainError> {
        if &self.model != expected {
            let got = serde_json::to_string(&self.model).unwrap_or_default();
            let want = serde_json::to_string(expected).unwrap_or_default();
            return Err(CheckpointError::ConfigMismatch(format!("checkpoint has {got}, expected {want}")).into());
        }
        self.into_trainer()
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

/// Validates framing and digest, and reports the stored precision.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let head = CHECKPOINT_MAGIC.len() + 4 + 1;
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < head + DIGEST_LEN {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    match bytes[12] {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        b => Err(CheckpointError::Corrupt(format!("unknown value width {b}"))),
    }
}

/// Hex SHA-256 of a checkpoint file's full contents.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
