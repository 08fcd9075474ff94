//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `EFAPRUNE`, little-endian u32 version, u64
//! metadata length, canonical JSON metadata, then raw little-endian f64
//! payloads for every tensor in metadata order. Each payload carries a
//! CRC32 in the metadata; writes go through a temp file and rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchDescriptor, ModelSpec, OptimizerState, ParamMap};
use crate::report::{canonical_json, parse_json};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EFAPRUNE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub accuracy_curve: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metadata {
    pub format_version: u32,
    pub arch: ArchDescriptor,
    pub tensors: Vec<TensorEntry>,
    pub train: TrainMeta,
}

/// In-memory checkpoint: model architecture, parameters (including
/// batch-norm running buffers), optimizer velocity and training history.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub params: ParamMap,
    pub velocity: ParamMap,
    pub train: TrainMeta,
}

impl Checkpoint {
    pub fn from_model(
        model: &ModelSpec,
        state: &OptimizerState,
        epoch: usize,
        loss_curve: Vec<f64>,
        accuracy_curve: Vec<f64>,
    ) -> Self {
        Checkpoint {
            arch: model.descriptor(),
            params: model.params.clone(),
            velocity: state.velocity.clone(),
            train: TrainMeta {
                epoch,
                seed: model.seed,
                loss_curve,
                accuracy_curve,
            },
        }
    }

    /// Rebuilds the model with the stored parameters.
    pub fn to_model(&self) -> Result<ModelSpec> {
        let mut model = ModelSpec::from_descriptor(&self.arch)?;
        for (key, tensor) in &self.params {
            match model.params.get_mut(key) {
                Some(slot) => {
                    if slot.shape() != tensor.shape() {
                        return Err(Error::PayloadMismatch {
                            name: key.clone(),
                            declared: slot.len(),
                            actual: tensor.len(),
                        });
                    }
                    *slot = tensor.clone();
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint tensor '{key}' has no slot in the architecture"
                    )))
                }
            }
        }
        Ok(model)
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState {
            velocity: self.velocity.clone(),
        }
    }
}

/// CRC-32 (IEEE 802.3, reflected) over a byte stream.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Velocity tensors ride in the same payload list under a reserved
/// prefix.
const VELOCITY_PREFIX: &str = "optimizer.velocity.";

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (k, t) in &cp.params {
        tensors.push((k.clone(), t));
    }
    for (k, t) in &cp.velocity {
        tensors.push((format!("{VELOCITY_PREFIX}{k}"), t));
    }

    let mut entries = Vec::with_capacity(tensors.len());
    let mut payloads = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let bytes = tensor_bytes(t);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            crc32: crc32(&bytes),
        });
        payloads.push(bytes);
    }
    let meta = Metadata {
        format_version: VERSION,
        arch: cp.arch.clone(),
        tensors: entries,
        train: cp.train.clone(),
    };
    let meta_json = canonical_json(&meta)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta_json.as_bytes());
    for p in &payloads {
        buf.extend_from_slice(p);
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            needed: 20,
            got: bytes.len(),
        });
    }
    if &bytes[0..8] != MAGIC {
        let found = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        return Err(Error::BadMagic {
            offset: 0,
            found,
            expected: u32::from_le_bytes(MAGIC[0..4].try_into().unwrap()),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta_end = 20 + meta_len;
    if bytes.len() < meta_end {
        return Err(Error::Truncated {
            needed: meta_end,
            got: bytes.len(),
        });
    }
    let meta: Metadata = parse_json(std::str::from_utf8(&bytes[20..meta_end]).map_err(
        |e| Error::Parse(format!("metadata is not UTF-8: {e}")),
    )?)?;

    let mut offset = meta_end;
    let mut params = ParamMap::new();
    let mut velocity = ParamMap::new();
    for entry in &meta.tensors {
        let count: usize = entry.shape.iter().product();
        let end = offset + count * 8;
        if bytes.len() < end {
            return Err(Error::PayloadMismatch {
                name: entry.name.clone(),
                declared: count,
                actual: (bytes.len().saturating_sub(offset)) / 8,
            });
        }
        let payload = &bytes[offset..end];
        if crc32(payload) != entry.crc32 {
            return Err(Error::ChecksumMismatch(entry.name.clone()));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&entry.shape, data)?;
        if let Some(stripped) = entry.name.strip_prefix(VELOCITY_PREFIX) {
            velocity.insert(stripped.to_string(), tensor);
        } else {
            params.insert(entry.name.clone(), tensor);
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Truncated {
            needed: offset,
            got: bytes.len(),
        });
    }

    Ok(Checkpoint {
        arch: meta.arch,
        params,
        velocity,
        train: meta.train,
    })
}

/// Write-through helper for runs that only need the model itself.
pub fn save_model(path: &Path, model: &ModelSpec) -> Result<()> {
    let state = OptimizerState {
        velocity: BTreeMap::new(),
    };
    save_checkpoint(
        path,
        &Checkpoint::from_model(model, &state, 0, vec![], vec![]),
    )
}
