//! Binary checkpoint: magic bytes, a `u32` version, a `u64` header length, a
//! JSON header, then every tensor as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Scaler;
use crate::numerics::Tensor;
use crate::processing::NORM_EPS;

use super::config::ModelConfig;
use super::model::{param_specs, Model};
use super::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"DPLETCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    norm_eps: f64,
    scaler: Option<Scaler>,
    tensors: Vec<TensorEntry>,
}

/// A model and the dataset scaler it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub scaler: Option<Scaler>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config.clone(),
            seed: self.model.seed,
            norm_eps: NORM_EPS,
            scaler: self.scaler.clone(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + self.model.params.count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.norm_eps != NORM_EPS {
            return Err(Error::Checkpoint(format!(
                "written with normalization epsilon {}, this build uses {NORM_EPS}",
                header.norm_eps
            )));
        }
        header.config.validate()?;

        let specs = param_specs(&header.config);
        if specs.len() != header.tensors.len()
            || specs
                .iter()
                .zip(&header.tensors)
                .any(|(s, t)| s.name != t.name || s.shape != t.shape)
        {
            return Err(bad("tensor directory does not match the configuration"));
        }
        let mut data = &bytes[20 + hlen..];
        let mut entries = Vec::with_capacity(specs.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if data.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            entries.push((t.name, Tensor::new(t.shape, values)?));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model: Model {
                config: header.config,
                params: ParamStore::from_entries(entries)?,
                seed: header.seed,
            },
            scaler: header.scaler,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
