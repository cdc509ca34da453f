//! Binary checkpoint: magic, version, config, then every parameter in
//! declaration order as little-endian `f64`.
//!
//! ```text
//! 0   8  magic "FFNCKPT\0"
//! 8   4  version (u32)
//! 12 24  n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len (u32 each)
//! 36  8  seed (u64)
//! 44  .. parameters
//! ```

use std::path::Path;

use super::{ModelConfig, ModelError, TransformerModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FFNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 44;

pub fn checkpoint_bytes(model: &TransformerModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint_bytes(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn u32_at(b: &[u8], off: usize) -> usize {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap()) as usize
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<TransformerModel, ModelError> {
    let corrupt = |m: &str| ModelError::Checkpoint(format!("corrupt: {m}"));
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32_at(bytes, 8) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = ModelConfig {
        n_layers: u32_at(bytes, 12),
        d_model: u32_at(bytes, 16),
        n_heads: u32_at(bytes, 20),
        d_ff: u32_at(bytes, 24),
        vocab_size: u32_at(bytes, 28),
        max_seq_len: u32_at(bytes, 32),
        seed: u64::from_le_bytes(bytes[36..44].try_into().unwrap()),
    };
    config
        .validate()
        .map_err(|e| corrupt(&format!("header config invalid: {e}")))?;
    let shapes = config.param_shapes();
    let n: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != HEADER_LEN + 8 * n {
        return Err(corrupt(&format!(
            "expected {} bytes for this config, found {}",
            HEADER_LEN + 8 * n,
            bytes.len()
        )));
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = Vec::with_capacity(shapes.len());
    for (_, shape) in shapes {
        let len = shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(len).collect();
        params.push(Tensor::new(shape, data)?);
    }
    Ok(TransformerModel::from_parts(config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel, ModelError> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and insists it was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<TransformerModel, ModelError> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(ModelError::ShapeMismatch {
            found: Box::new(model.config().clone()),
            expected: Box::new(expected.clone()),
        });
    }
    Ok(model)
}
