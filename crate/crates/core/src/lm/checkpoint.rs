//! Binary checkpoint format:
//!
//! ```text
//! magic    8 bytes  "EDSTLM\0\x01"
//! version  u32 LE
//! cfg_len  u32 LE
//! config   cfg_len bytes of JSON (ModelConfig + role)
//! count    u64 LE   number of parameters
//! params   count * f64 LE
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LanguageModel, ModelConfig, Role};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EDSTLM\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    role: Role,
}

pub fn save_checkpoint(model: &LanguageModel, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header { config: model.config().clone(), role: model.role() })?;
    let mut buf = Vec::with_capacity(64 + header.len() + model.param_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for v in model.params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
    let s = &buf[*at..end];
    *at = end;
    Ok(s)
}

pub fn load_checkpoint(path: &Path) -> Result<LanguageModel> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let buf = fs::read(path)?;
    let mut at = 0;
    if take(&buf, &mut at, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    if buf.len() < 32 {
        return Err(Error::CorruptCheckpoint("truncated".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("digest mismatch".into()));
    }
    let hlen = u32::from_le_bytes(take(body, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(body, &mut at, hlen)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let count = u64::from_le_bytes(take(body, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(body, &mut at, count.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("count overflow".into()))?)?;
    if at != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    LanguageModel::from_parts(header.config, params, header.role)
}
