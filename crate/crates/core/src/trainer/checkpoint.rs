//! Binary checkpoints.
//!
//! Layout: `PDDMCKPT` magic, `u32` format version, `u64` header length, a
//! JSON header (config, layer dims, counters, tensor table), the model
//! tensors as little-endian `f64`, the optimizer velocity (same order), and
//! a SHA-256 digest of every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingNet;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::pddm::PddmParams;

use super::{Model, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PDDMCKPT";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub velocity: Option<Vec<f64>>,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: (usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    embedding_dims: Vec<usize>,
    step: u64,
    epoch: u64,
    has_velocity: bool,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    let tensors = model
        .tensors()
        .into_iter()
        .map(|t| TensorEntry {
            name: t.name,
            shape: t.shape,
        })
        .collect();
    let header = Header {
        config: ckpt.config.clone(),
        embedding_dims: model.embedding.dims().to_vec(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        has_velocity: ckpt.velocity.is_some(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let flat = model.flatten();
    if let Some(v) = &ckpt.velocity {
        if v.len() != flat.len() {
            return Err(Error::CheckpointShape {
                what: "optimizer state",
                found: v.len().to_string(),
                expected: flat.len().to_string(),
            });
        }
    }

    let mut buf = Vec::with_capacity(64 + header.len() + 16 * flat.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for x in flat.iter().chain(ckpt.velocity.iter().flatten()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    // Write-then-rename so an interrupted save never leaves a truncated file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| corrupt(self.path, "tensor size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: PathBuf::from(path),
        reason: reason.into(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(corrupt(path, "file too short"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.into(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt(path, "checksum mismatch"));
    }

    let mut r = Reader {
        bytes: body,
        pos: 12,
        path,
    };
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| corrupt(path, "header length"))?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| corrupt(path, format!("header: {e}")))?;

    let dims = &header.embedding_dims;
    let d = *dims
        .last()
        .ok_or_else(|| corrupt(path, "empty layer dims"))?;
    let mut model = Model {
        embedding: EmbeddingNet::zeros(dims)?,
        pddm: PddmParams::zeros(d),
    };
    let expected: Vec<(String, (usize, usize))> = model
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    let found: Vec<(String, (usize, usize))> = header
        .tensors
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected != found {
        return Err(corrupt(path, "tensor table does not match the layer dims"));
    }
    let n = model.num_params();
    let flat = r.f64s(n)?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(corrupt(path, "non-finite parameter"));
    }
    model.assign_flat(&flat);
    let velocity = if header.has_velocity {
        Some(r.f64s(n)?)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(corrupt(path, "trailing bytes"));
    }
    Ok(Checkpoint {
        config: header.config,
        model,
        velocity,
        step: header.step,
        epoch: header.epoch,
    })
}

/// Loads a checkpoint and checks that its architecture matches `cfg` and `input_dim`.
pub fn load_checkpoint_for(path: &Path, cfg: &TrainConfig, input_dim: usize) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let expected = cfg.layer_dims(input_dim);
    let found = ckpt.model.embedding.dims();
    if found != expected.as_slice() {
        return Err(Error::CheckpointShape {
            what: "layer dims",
            found: format!("{found:?}"),
            expected: format!("{expected:?}"),
        });
    }
    Ok(ckpt)
}
