//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `TDCKPT01`, little-endian `u64` header length, a
//! JSON header (role, step, config hash, topology, free-form metadata,
//! weight count), then the weights as little-endian `f64`. Weights are
//! written bit for bit, so a round trip is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetworkParams, Topology};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TDCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: String,
    pub step: u64,
    pub config_hash: String,
    pub metadata: serde_json::Value,
    pub params: NetworkParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    role: String,
    step: u64,
    config_hash: String,
    topology: Topology,
    metadata: serde_json::Value,
    n_weights: usize,
}

impl Checkpoint {
    pub fn new(role: &str, step: u64, config_hash: &str, params: NetworkParams) -> Self {
        Checkpoint {
            role: role.to_string(),
            step,
            config_hash: config_hash.to_string(),
            metadata: serde_json::Value::Null,
            params,
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            role: self.role.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            topology: self.params.topology().clone(),
            metadata: self.metadata.clone(),
            n_weights: self.params.len(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for w in self.params.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Checkpoint(why.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let raw = &bytes[16 + hlen..];
        if raw.len() != 8 * header.n_weights {
            return Err(bad(&format!(
                "expected {} weight bytes, found {}",
                8 * header.n_weights,
                raw.len()
            )));
        }
        let weights = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Checkpoint {
            role: header.role,
            step: header.step,
            config_hash: header.config_hash,
            metadata: header.metadata,
            params: NetworkParams::from_weights(header.topology, weights)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}
