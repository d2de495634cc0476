//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! b"LORM"                magic
//! u32                    format version
//! u32                    header length in bytes
//! [u8; header length]    JSON header: backbone config, windowing, channel
//!                        stats, codebook hash, tensor manifest
//! f32 * num_scalars      parameters, canonical order, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::model::{BackboneConfig, ModelParameters};
use crate::signal::{ChannelStats, WindowingConfig};
use crate::tokenizer::CodebookSet;

pub const MAGIC: &[u8; 4] = b"LORM";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to score windows after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub windowing: WindowingConfig,
    pub stats: ChannelStats,
    /// [`CodebookSet::content_hash`] of the codebooks the model was trained with.
    pub codebook_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    windowing: WindowingConfig,
    stats: ChannelStats,
    codebook_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

fn corrupt(msg: impl Into<String>) -> LormError {
    LormError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.params.config;
        let header = Header {
            config: cfg.clone(),
            windowing: self.windowing,
            stats: self.stats.clone(),
            codebook_hash: self.codebook_hash.clone(),
            tensors: self
                .params
                .iter()
                .map(|(id, t)| TensorEntry { name: id.to_string(), shape: [t.nrows(), t.ncols()] })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialisation");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for &v in t.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body_start = 12 + header_len;
        if bytes.len() < body_start {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..body_start])?;
        let cfg = header.config;
        cfg.validate()?;
        header.windowing.validate()?;

        let ids = cfg.param_ids();
        if header.tensors.len() != ids.len() {
            return Err(corrupt("tensor manifest does not match configuration"));
        }
        let mut offset = body_start;
        let mut tensors = Vec::with_capacity(ids.len());
        for (id, entry) in ids.iter().zip(&header.tensors) {
            let shape = cfg.shape_of(*id);
            if entry.name != id.to_string() || entry.shape != [shape.0, shape.1] {
                return Err(corrupt(format!("manifest entry {} does not match {id}", entry.name)));
            }
            let n = shape.0 * shape.1;
            let end = offset + 4 * n;
            if bytes.len() < end {
                return Err(corrupt("truncated parameter block"));
            }
            let values = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(Array2::from_shape_vec(shape, values).expect("shape checked"));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after parameter block"));
        }
        Ok(Self {
            params: ModelParameters::from_tensors(cfg, tensors)?,
            windowing: header.windowing,
            stats: header.stats,
            codebook_hash: header.codebook_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless `codebooks` are the ones the model was trained with.
    pub fn check_codebooks(&self, codebooks: &CodebookSet) -> Result<()> {
        let hash = codebooks.content_hash();
        if hash != self.codebook_hash {
            return Err(corrupt(format!(
                "codebook hash mismatch: checkpoint expects {}, got {hash}",
                self.codebook_hash
            )));
        }
        if codebooks.k != self.params.config.k || codebooks.channels() != self.params.config.channels {
            return Err(corrupt("codebook K or channel count differs from the model"));
        }
        Ok(())
    }
}
