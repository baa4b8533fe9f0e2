//! Binary model checkpoints.
//!
//! Layout (little-endian): `MJRN`, u32 version, u32 config length, JSON
//! config, u32 value count, f32 values (weights, then feature shifts, then
//! feature scales), u32 CRC-32 of all preceding bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cnn::{ArchConfig, ModelParams};
use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MJRN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    seed: u64,
}

/// Weights are stored as f32, so a reloaded model matches the original to
/// single precision.
pub fn save_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<(), ModelError> {
    params.validate()?;
    let header = serde_json::to_vec(&Header { arch: params.arch.clone(), seed: params.seed }).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + header.len() + 4 * params.weights.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let values: Vec<f64> = params.weights.iter().chain(&params.feature_shift).chain(&params.feature_scale).copied().collect();
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for w in &values {
        buf.extend_from_slice(&(*w as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<ModelParams, ModelError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if buf.len() < 20 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing MJRN magic"));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(bad("checksum mismatch"));
    }
    let mut pos = 4;
    let u32_at = |pos: &mut usize| -> Result<u32, ModelError> {
        let bytes = body.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
    };
    let version = u32_at(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u32_at(&mut pos)? as usize;
    let header_bytes = body.get(pos..pos + header_len).ok_or_else(|| bad("truncated config block"))?;
    pos += header_len;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| ModelError::Checkpoint(format!("config block: {e}")))?;
    let count = u32_at(&mut pos)? as usize;
    let blob = body.get(pos..).filter(|b| b.len() == 4 * count).ok_or_else(|| bad("weight blob length mismatch"))?;
    let mut weights: Vec<f64> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let nf = header.arch.feature_count();
    if header.arch.validate().is_err() || weights.len() != header.arch.weight_count() + 2 * nf {
        return Err(bad("weight blob does not match the configured architecture"));
    }
    let feature_scale = weights.split_off(weights.len() - nf);
    let feature_shift = weights.split_off(weights.len() - nf);
    let params = ModelParams { arch: header.arch, seed: header.seed, weights, feature_shift, feature_scale };
    params.validate().map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok(params)
}

pub fn write_checkpoint_file(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    save_checkpoint(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint_file(path: &Path) -> Result<ModelParams, ModelError> {
    load_checkpoint(std::fs::File::open(path)?)
}
