//! Binary checkpoint container.
//!
//! Layout: magic `XDCK`, little-endian `u32` format version, `u64` header
//! length, a JSON header (model spec, config hash, tensor names and lengths),
//! then every parameter as little-endian `f64` in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_parameters, ModelBundle, ModelSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelBundle,
    /// Hash of the training configuration that produced the parameters.
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: ModelSpec,
    config_hash: String,
    tensors: Vec<(String, usize)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            version: CHECKPOINT_VERSION,
            spec: self.model.spec.clone(),
            config_hash: self.config_hash.clone(),
            tensors: params.iter().map(|(n, p)| (n.clone(), p.len())).collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.model.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in params {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} does not match supported version {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        let header: Header = serde_json::from_slice(body.get(..header_len).ok_or_else(|| bad("truncated header"))?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad("header version mismatch"));
        }
        let mut model = init_parameters(&header.spec, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut data = &body[header_len..];
        let tensors = model.params_mut();
        if tensors.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the model spec"));
        }
        for ((name, dst), (hname, hlen)) in tensors.into_iter().zip(&header.tensors) {
            if &name != hname || dst.len() != *hlen {
                return Err(Error::Checkpoint(format!("tensor {hname} does not match model layout ({name})")));
            }
            if data.len() < 8 * hlen {
                return Err(bad("truncated tensor data"));
            }
            for (v, chunk) in dst.iter_mut().zip(data[..8 * hlen].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            data = &data[8 * hlen..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { model, config_hash: header.config_hash })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
