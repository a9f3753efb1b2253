//! Single-file checkpoint archive.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "DQECKPT\0" | u32 version | u64 n + TOML config | u64 n + f64 history
//! | u64 n + JSON tensor manifest | u64 n + weight blob | SHA-256 of all preceding bytes
//! ```
//!
//! The manifest lists every state tensor (parameters and batch-norm running
//! statistics) by name, shape, dtype and byte offset into the blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::densenet::DenseNet;
use super::scalar::Scalar;
use super::train::{Checkpoint, TrainConfig};
use super::NetError;
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DQECKPT\0";
const DIGEST_LEN: usize = 32;

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    bytes: usize,
}

fn push_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>, NetError> {
    let config = toml::to_string(&ckpt.config)
        .map_err(|e| NetError::InvalidConfig(format!("config not serializable: {e}")))?;
    let mut history = Vec::with_capacity(ckpt.history.len() * 8);
    for h in &ckpt.history {
        history.extend_from_slice(&h.to_le_bytes());
    }
    let mut blob = Vec::new();
    let mut manifest = Vec::new();
    for p in ckpt.net.state() {
        let offset = blob.len();
        for v in &p.value {
            v.write_le(&mut blob);
        }
        manifest.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: f32::DTYPE.to_string(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(blob.len() + config.len() + manifest.len() + 128);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.format_version.to_le_bytes());
    push_section(&mut out, config.as_bytes());
    out.extend_from_slice(&(ckpt.history.len() as u64).to_le_bytes());
    out.extend_from_slice(&history);
    push_section(&mut out, &manifest);
    push_section(&mut out, &blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| NetError::CorruptCheckpoint("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize, NetError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    }

    fn section(&mut self) -> Result<&'a [u8], NetError> {
        let n = self.u64()?;
        self.take(n)
    }
}

/// Parses and verifies checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, NetError> {
    let corrupt = |m: &str| NetError::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(NetError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(corrupt("truncated checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader {
        bytes: body,
        pos: 12,
    };
    let config_text =
        std::str::from_utf8(r.section()?).map_err(|_| corrupt("config is not UTF-8"))?;
    let config: TrainConfig = toml::from_str(config_text)
        .map_err(|e| NetError::CorruptCheckpoint(format!("config: {e}")))?;
    let n_history = r.u64()?;
    let history = r
        .take(
            n_history
                .checked_mul(8)
                .ok_or_else(|| corrupt("history length overflow"))?,
        )?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let manifest: Vec<TensorEntry> = serde_json::from_slice(r.section()?)
        .map_err(|e| NetError::CorruptCheckpoint(format!("manifest: {e}")))?;
    let blob = r.section()?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after weight blob"));
    }

    let mut net = DenseNet::<f32>::new(config.spec(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let state = net.state_mut();
    if state.len() != manifest.len() {
        return Err(corrupt(
            "tensor count does not match the configured architecture",
        ));
    }
    for (p, entry) in state.into_iter().zip(&manifest) {
        if p.name != entry.name || p.shape != entry.shape || entry.dtype != f32::DTYPE {
            return Err(NetError::CorruptCheckpoint(format!(
                "unexpected tensor {}",
                entry.name
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.bytes)
            .filter(|e| *e <= blob.len());
        let end = end.ok_or_else(|| corrupt("tensor extends past the weight blob"))?;
        if entry.bytes != p.value.len() * f32::BYTES {
            return Err(NetError::CorruptCheckpoint(format!(
                "tensor {} has wrong size",
                entry.name
            )));
        }
        for (v, chunk) in p
            .value
            .iter_mut()
            .zip(blob[entry.offset..end].chunks_exact(f32::BYTES))
        {
            *v = f32::read_le(chunk);
        }
    }
    Ok(Checkpoint {
        format_version: version,
        config,
        history,
        net,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), NetError> {
    let bytes = encode(ckpt)?;
    write_atomic(path, &bytes).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
