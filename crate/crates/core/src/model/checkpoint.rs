//! Binary checkpoint: magic, version, JSON header, raw little-endian f64
//! parameters, then a SHA-256 digest of everything before it.

use super::{Architecture, DataSplit, EpochRecord, OutcomeScale, TrainConfig, TrainedModel};
use crate::encoder::FeatureScaling;
use crate::error::{Result, StedrError};
use crate::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STEDRCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    n_codes: usize,
    pr_t: f64,
    scaling: Option<FeatureScaling>,
    outcome_scale: OutcomeScale,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    split: DataSplit,
    tensors: Vec<(String, usize, usize)>,
}

fn corrupt(msg: impl Into<String>) -> StedrError {
    StedrError::Checkpoint(msg.into())
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            n_codes: self.n_codes,
            pr_t: self.pr_t,
            scaling: self.scaling.clone(),
            outcome_scale: self.outcome_scale,
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            split: self.split.clone(),
            tensors: self
                .store
                .names()
                .iter()
                .zip(self.store.values())
                .map(|(n, v)| (n.clone(), v.nrows(), v.ncols()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 8 * self.store.n_scalars() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.store.values() {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        if &body[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        header.config.validate()?;

        let mut store = ParamStore::new();
        let arch = Architecture::build(
            &header.config,
            header.n_codes,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(header.config.seed),
        );
        if store.len() != header.tensors.len() {
            return Err(corrupt("tensor count does not match the configuration"));
        }
        let mut data = &body[20 + len..];
        for (name, rows, cols) in &header.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| corrupt(format!("unknown tensor {name}")))?;
            let target = store.value_mut(id);
            if target.dim() != (*rows, *cols) {
                return Err(corrupt(format!("tensor {name} has shape {rows}x{cols}")));
            }
            let need = rows * cols * 8;
            if data.len() < need {
                return Err(corrupt("truncated tensor data"));
            }
            for (x, chunk) in target.iter_mut().zip(data[..need].chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(corrupt("trailing tensor data"));
        }
        Ok(Self {
            config: header.config,
            n_codes: header.n_codes,
            arch,
            store,
            pr_t: header.pr_t,
            scaling: header.scaling,
            outcome_scale: header.outcome_scale,
            history: header.history,
            best_epoch: header.best_epoch,
            split: header.split,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    TrainedModel::from_bytes(&std::fs::read(path)?)
}
