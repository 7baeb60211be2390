//! Model checkpoints.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8     magic "ITSCCKPT"
//! bytes 8..12    header length L, u32 little-endian
//! bytes 12..12+L UTF-8 JSON header (see [`CheckpointHeader`])
//! rest           every tensor listed in the header, in order, as
//!                little-endian f32, row-major
//! ```
//!
//! The tensor list follows the model's parameter visit order and includes
//! the batch-norm running statistics. The header carries the SHA-256 of the
//! blob so truncation and bit rot are detected on load.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ItscModel, ModelSpec};
use crate::nn::{Parameters, Real};

pub const MAGIC: &[u8; 8] = b"ITSCCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on the header size; anything larger is treated as corruption.
const MAX_HEADER: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    pub config_hash: String,
    /// Canonical configuration pairs of the producing run.
    pub config: BTreeMap<String, String>,
    pub blob_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub header: CheckpointHeader,
    pub model: ItscModel<F>,
}

fn tensors_and_blob<F: Real>(model: &mut ItscModel<F>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    model.visit("", &mut |slot| {
        tensors.push(TensorEntry {
            name: slot.name.clone(),
            shape: slot.shape.clone(),
        });
        for v in slot.value.iter() {
            blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    });
    (tensors, blob)
}

/// Serializes `model` with its provenance.
pub fn to_bytes<F: Real>(
    model: &mut ItscModel<F>,
    seed: u64,
    config_hash: &str,
    config: BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let (tensors, blob) = tensors_and_blob(model);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec: model.spec,
        tensors,
        seed,
        config_hash: config_hash.to_string(),
        config,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save<F: Real>(
    path: &Path,
    model: &mut ItscModel<F>,
    seed: u64,
    config_hash: &str,
    config: BTreeMap<String, String>,
) -> Result<()> {
    let bytes = to_bytes(model, seed, config_hash, config)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses and validates a checkpoint, rebuilding the model it describes.
pub fn from_bytes<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if len > MAX_HEADER || 12 + len > bytes.len() {
        return Err(corrupt(format!("header length {len} exceeds file size {}", bytes.len())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + len])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    header
        .spec
        .validate()
        .map_err(|e| corrupt(format!("invalid model spec: {e}")))?;
    let blob = &bytes[12 + len..];
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(corrupt("parameter blob checksum mismatch"));
    }

    // Weights are overwritten below; the RNG only shapes the skeleton.
    let mut model = ItscModel::<F>::new(header.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (expected, _) = tensors_and_blob(&mut model);
    if expected != header.tensors {
        return Err(corrupt("tensor list does not match the model spec"));
    }
    let total: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(corrupt(format!("blob holds {} bytes, expected {}", blob.len(), total * 4)));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| F::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64));
    model.visit("", &mut |slot| {
        for v in slot.value.iter_mut() {
            *v = floats.next().expect("length checked");
        }
    });
    Ok(Checkpoint { header, model })
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    from_bytes(&std::fs::read(path)?)
}
