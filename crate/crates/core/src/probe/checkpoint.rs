//! Probe checkpoints and loss-history CSVs.
//!
//! A checkpoint uses the bundle byte conventions: 8-byte magic `DPCKPT01`,
//! `u32` little-endian manifest length, JSON manifest, then a float32
//! little-endian payload holding the mixing logits (`layer + 1` values), the
//! scale, and the projection (`rank x input_dim`, row-major).

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, ProbeError, ProbeParams};
use crate::embedstore::EmbedError;
use crate::fsutil::{atomic_write, atomic_write_with};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub layer: usize,
    pub input_dim: usize,
    pub rank: usize,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub best_epoch: usize,
    /// Dev loss of the saved parameters, when known.
    pub dev_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn for_params(p: &ProbeParams, seed: u64, config_hash: &str, code_version: &str) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            layer: p.layer(),
            input_dim: p.input_dim(),
            rank: p.rank(),
            seed,
            config_hash: config_hash.to_string(),
            code_version: code_version.to_string(),
            best_epoch: 0,
            dev_loss: None,
        }
    }

    fn payload_values(&self) -> usize {
        self.layer + 2 + self.rank * self.input_dim
    }
}

pub fn save_checkpoint(path: &Path, params: &ProbeParams, meta: &CheckpointMeta) -> Result<(), ProbeError> {
    if meta.layer != params.layer() || meta.rank != params.rank() || meta.input_dim != params.input_dim() {
        return Err(ProbeError::InvalidParams("checkpoint metadata does not describe these parameters".into()));
    }
    let json = serde_json::to_vec(meta).map_err(|e| EmbedError::Manifest(e.to_string()))?;
    let mut bytes = Vec::with_capacity(12 + json.len() + meta.payload_values() * 4);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    let gamma = params.gamma();
    let values = params.mix_logits().iter().chain(std::iter::once(&gamma)).chain(params.projection());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes).map_err(EmbedError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ProbeParams), ProbeError> {
    let bytes = fs::read(path).map_err(EmbedError::from)?;
    let actual = bytes.len() as u64;
    if bytes.len() < 12 {
        return Err(EmbedError::Truncated { expected: 12, actual }.into());
    }
    if &bytes[..6] != b"DPCKPT" {
        return Err(EmbedError::BadMagic(bytes[..8].to_vec()).into());
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(EmbedError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[6..8]).into_owned(),
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + json_len {
        return Err(EmbedError::Truncated { expected: (12 + json_len) as u64, actual }.into());
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[12..12 + json_len]).map_err(|e| EmbedError::Manifest(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(EmbedError::VersionMismatch { found: meta.format_version.to_string(), expected: FORMAT_VERSION }.into());
    }
    let expected = (12 + json_len + meta.payload_values() * 4) as u64;
    if actual < expected {
        return Err(EmbedError::Truncated { expected, actual }.into());
    }
    if actual > expected {
        return Err(EmbedError::TrailingBytes { expected, actual }.into());
    }
    let values: Vec<f32> = bytes[12 + json_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let n_mix = meta.layer + 1;
    let params = ProbeParams::new(
        meta.layer,
        meta.input_dim,
        meta.rank,
        values[..n_mix].to_vec(),
        values[n_mix],
        values[n_mix + 1..].to_vec(),
    )?;
    Ok((meta, params))
}

/// Writes `epoch,train_loss,dev_loss,lr,lr_reduced,zero_distance_pairs` rows.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> io::Result<()> {
    atomic_write_with(path, |w| {
        writeln!(w, "epoch,train_loss,dev_loss,lr,lr_reduced,zero_distance_pairs")?;
        for r in history {
            writeln!(
                w,
                "{},{:.10},{:.10},{:e},{},{}",
                r.epoch, r.train_loss, r.dev_loss, r.lr, r.lr_reduced, r.zero_distance_pairs
            )?;
        }
        Ok(())
    })
}
