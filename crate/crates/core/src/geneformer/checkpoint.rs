//! Checkpoint container:
//!
//! ```text
//! "GFCK" | version u16 | config_len u32 | config JSON
//!        | scalar_count u64 | f32 LE parameters in declared order
//!        | SHA-256 of everything before it
//! ```
//!
//! The trailing hash doubles as the model fingerprint stored in archives.

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{GeneFormer, ModelConfig};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"GFCK";
const HASH_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint content hash mismatch")]
    HashMismatch,
    #[error("checkpoint version {0} unsupported")]
    VersionUnsupported(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn body(model: &GeneFormer) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let params = model.params();
    let total: usize = params.ids().map(|id| params.get(id).len()).sum();
    let mut out = Vec::with_capacity(4 + 2 + 4 + config.len() + 8 + 4 * total + HASH_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(total as u64).to_le_bytes());
    for id in params.ids() {
        for &x in params.get(id).data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub(super) fn content_hash(model: &GeneFormer) -> [u8; 32] {
    Sha256::digest(body(model)).into()
}

pub fn save_checkpoint(model: &GeneFormer) -> Vec<u8> {
    let mut out = body(model);
    let hash: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&hash);
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Malformed("truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<GeneFormer, CheckpointError> {
    if bytes.len() < MAGIC.len() + 2 + HASH_LEN || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (content, trailer) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(content).as_slice() != trailer {
        return Err(CheckpointError::HashMismatch);
    }
    let mut rest = &content[4..];
    let version = u16::from_le_bytes(take(&mut rest, 2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let config_len = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes")) as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut rest, config_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let mut model = GeneFormer::new(config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let total = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes")) as usize;
    let params = model.params_mut();
    let expected: usize = params.ids().map(|id| params.get(id).len()).sum();
    if total != expected || rest.len() != 4 * total {
        return Err(CheckpointError::Malformed(format!(
            "{total} stored scalars, config needs {expected}"
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    let mut floats = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for id in ids {
        for x in params.get_mut(id).data_mut() {
            *x = floats.next().expect("count checked");
        }
    }
    Ok(model)
}
