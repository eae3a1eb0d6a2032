//! Binary checkpoint: magic, format version, a length-prefixed JSON header
//! (model config with its schema, the BPE tables, tensor directory), then
//! every tensor as little-endian f32 in declared order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{LanguageModel, ModelConfig, Weights};
use crate::bpe::{BpeError, BpeModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STYLEDLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("tensor `{name}` has {got} values, config implies {expected}")]
    TensorSize { name: String, got: usize, expected: usize },
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    bpe_merges: String,
    bpe_vocab: String,
    tensors: Vec<TensorEntry>,
}

/// A trained model together with the subword vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LanguageModel<f32>,
    pub bpe: BpeModel,
}

impl Checkpoint {
    pub fn new(model: LanguageModel<f32>, bpe: BpeModel) -> Self {
        Checkpoint { model, bpe }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.model.config;
        let names = Weights::<f32>::tensor_names(cfg);
        let tensors = self.model.weights.tensors();
        let header = Header {
            config: cfg.clone(),
            bpe_merges: self.bpe.merges_text(),
            bpe_vocab: self.bpe.vocab_text(),
            tensors: names
                .into_iter()
                .zip(&tensors)
                .map(|(name, t)| TensorEntry { name, len: t.len() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + header.len() + 4 * self.model.weights.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in tensors {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_start = 20usize.checked_add(header_len).ok_or(CheckpointError::Truncated)?;
        if bytes.len() < body_start {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[20..body_start])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let bpe = BpeModel::from_text(&header.bpe_merges, &header.bpe_vocab)?;
        if bpe.vocab_size() != header.config.vocab_size {
            return Err(CheckpointError::Header("BPE vocabulary does not match model vocab_size".into()));
        }

        let mut weights = Weights::<f32>::zeros(&header.config);
        let names = Weights::<f32>::tensor_names(&header.config);
        let mut offset = body_start;
        {
            let slots = weights.tensors_mut();
            if slots.len() != header.tensors.len() {
                return Err(CheckpointError::Header("tensor count mismatch".into()));
            }
            for ((slot, entry), name) in slots.into_iter().zip(&header.tensors).zip(names) {
                if entry.name != name || entry.len != slot.len() {
                    return Err(CheckpointError::TensorSize {
                        name: entry.name.clone(),
                        got: entry.len,
                        expected: slot.len(),
                    });
                }
                let end = offset + 4 * slot.len();
                let raw = bytes.get(offset..end).ok_or(CheckpointError::Truncated)?;
                for (x, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
                    *x = f32::from_le_bytes(chunk.try_into().unwrap());
                }
                offset = end;
            }
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Header("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { model: LanguageModel::new(header.config, weights), bpe })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
