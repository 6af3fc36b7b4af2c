//! Binary checkpoint format.
//!
//! Layout (little-endian): magic, format version `u32`, header length `u32`,
//! UTF-8 JSON header, then every parameter as `f32` in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LMConfig, Role, TinyLM};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"SDLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: LMConfig,
    pub config_hash: String,
    pub role: Role,
    pub seed: u64,
    pub step: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| corrupt(format!("truncated at byte {at}")))?;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}

impl TinyLM<f32> {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            role: self.role,
            seed: self.seed,
            step: self.step,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for x in p.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = read_u32(bytes, 4)?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = read_u32(bytes, 8)? as usize;
        let body = 12 + hlen;
        let header_bytes = bytes
            .get(12..body)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
        header.config.validate()?;
        if header.config.hash() != header.config_hash {
            return Err(Error::CheckpointConfig(
                "stored config hash does not match stored config".into(),
            ));
        }
        let specs = header.config.param_specs();
        let expected: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let blob = &bytes[body..];
        if blob.len() != 4 * expected {
            return Err(corrupt(format!(
                "parameter blob holds {} bytes, config requires {}",
                blob.len(),
                4 * expected
            )));
        }
        let mut floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")));
        let params = specs
            .into_iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                Tensor::new(shape, floats.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = TinyLM::from_params(header.config, params, header.role)?;
        model.seed = header.seed;
        model.step = header.step;
        Ok(model)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it was written for `expected`.
    pub fn load_with_config(path: impl AsRef<Path>, expected: &LMConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.config.hash() != expected.hash() {
            return Err(Error::CheckpointConfig(format!(
                "checkpoint config {} differs from expected {}",
                model.config.hash(),
                expected.hash()
            )));
        }
        Ok(model)
    }
}
