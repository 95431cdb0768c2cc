//! Little-endian weights file.
//!
//! ```text
//! offset  field
//! 0       magic "ESPW"
//! 4       format version (u32) = 1
//! 8       vocab_size (u32)
//! 12      model_dim (u32)
//! 16      num_layers (u32)
//! 20      num_heads (u32)
//! 24      ffn_dim (u32)
//! 28      rope_base (f32)
//! 32      seed low 32 bits (u32)
//! 36      seed high 32 bits (u32)
//! 40      tensors as f32 arrays, no padding:
//!           embedding            V x d
//!           per layer:  attn_norm d, wq d x d, wk d x d, wv d x d, wo d x d,
//!                       ffn_norm d, w_up d x ffn, w_down ffn x d
//!           lm_head              d x V
//! ```
//! Matrices are row-major `[in][out]`. The file length must match exactly.

use std::fs;
use std::path::Path;

use crate::error::{EspError, Result};
use crate::lm::{FrozenModel, ModelConfig};

pub const MAGIC: [u8; 4] = *b"ESPW";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

pub fn to_bytes(model: &FrozenModel) -> Vec<u8> {
    let cfg = model.config();
    let tensors = model.tensors();
    let body: usize = tensors.iter().map(|t| t.len() * 4).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [
        cfg.vocab_size,
        cfg.model_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.ffn_dim,
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.rope_base.to_le_bytes());
    out.extend_from_slice(&(cfg.seed as u32).to_le_bytes());
    out.extend_from_slice(&((cfg.seed >> 32) as u32).to_le_bytes());
    for t in tensors {
        for w in t {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<FrozenModel> {
    if bytes.len() < 8 {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        if n < 4 || found != MAGIC {
            return Err(EspError::BadMagic { found });
        }
        return Err(EspError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(EspError::BadMagic { found });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(EspError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(EspError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let config = ModelConfig {
        vocab_size: u32_at(bytes, 8) as usize,
        model_dim: u32_at(bytes, 12) as usize,
        num_layers: u32_at(bytes, 16) as usize,
        num_heads: u32_at(bytes, 20) as usize,
        ffn_dim: u32_at(bytes, 24) as usize,
        rope_base: f32::from_le_bytes(bytes[28..32].try_into().expect("4 bytes")),
        seed: u32_at(bytes, 32) as u64 | (u32_at(bytes, 36) as u64) << 32,
    };
    config
        .validate()
        .map_err(|e| EspError::ShapeMismatch(format!("weights header: {e}")))?;

    let mut model = FrozenModel::zeros(config);
    let body: usize = model.tensors().iter().map(|t| t.len() * 4).sum();
    let expected = HEADER_LEN + body;
    if bytes.len() < expected {
        return Err(EspError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(EspError::TrailingData {
            expected,
            actual: bytes.len(),
        });
    }
    let mut off = HEADER_LEN;
    for t in model.tensors_mut() {
        for w in t.iter_mut() {
            *w = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            off += 4;
        }
    }
    Ok(model)
}

pub fn save_model(model: &FrozenModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| EspError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FrozenModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| EspError::io(path, e))?;
    from_bytes(&bytes)
}
