//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `GSPDCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then every
//! tensor of [`ModelParams::tensors`] in order as little-endian `f64`,
//! row-major. The header records each tensor's name and shape and the
//! SHA-256 of the payload.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"GSPDCKPT";
pub const VERSION: u32 = 1;
const FORMAT_ID: &str = "geo-spd-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::IncompatibleFormat(msg.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes(&self.model)?;
        let mut payload = Vec::with_capacity(self.params.num_scalars() * 8);
        let mut tensors = Vec::new();
        for (name, t) in self.params.tensors() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
            });
            for i in 0..t.nrows() {
                for j in 0..t.ncols() {
                    payload.extend_from_slice(&t[(i, j)].to_le_bytes());
                }
            }
        }
        let header = Header {
            format: FORMAT_ID.to_string(),
            version: VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            tensors,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint. Any structural problem, version mismatch or
    /// checksum failure is reported as `IncompatibleFormat`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("checkpoint version {version} (supported: {VERSION})")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(20))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("checkpoint header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(format!("checkpoint header: {e}")))?;
        if header.format != FORMAT_ID || header.version != VERSION {
            return Err(bad(format!("unsupported checkpoint format {} v{}", header.format, header.version)));
        }
        header.model.validate().map_err(|e| bad(format!("checkpoint config: {e}")))?;
        let payload = &bytes[header_end..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("checkpoint payload checksum mismatch"));
        }
        let mut params = ModelParams::zeros(&header.model);
        let expected: usize = params.num_scalars() * 8;
        if payload.len() != expected {
            return Err(bad(format!("checkpoint payload holds {} bytes, expected {expected}", payload.len())));
        }
        let mut offset = 0;
        let entries = &header.tensors;
        let slots = params.tensors_mut();
        if entries.len() != slots.len() {
            return Err(bad("checkpoint tensor list does not match the model"));
        }
        for (entry, (name, slot)) in entries.iter().zip(slots) {
            if entry.name != name || (entry.rows, entry.cols) != slot.shape() {
                return Err(bad(format!("checkpoint tensor {} does not match model tensor {name}", entry.name)));
            }
            let vals: Vec<f64> = payload[offset..offset + 8 * slot.len()]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            *slot = DMatrix::from_row_slice(entry.rows, entry.cols, &vals);
            offset += 8 * slot.len();
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
