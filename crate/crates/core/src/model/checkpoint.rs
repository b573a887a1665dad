//! Binary checkpoint: magic, a JSON header describing config and tensor shapes,
//! then raw little-endian values in header order. The header may carry a free-form
//! string metadata map.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ModelParams};
use crate::numerics::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"SLCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        self.to_checkpoint_bytes_with(&BTreeMap::new())
    }

    pub fn to_checkpoint_bytes_with(&self, metadata: &BTreeMap<String, String>) -> Vec<u8> {
        let params = self.params();
        let header = Header {
            config: self.config().clone(),
            dtype: T::DTYPE.to_string(),
            tensors: params
                .names()
                .iter()
                .zip(params.tensors())
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: metadata.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let width = value_width::<T>();
        let mut out = Vec::with_capacity(16 + header.len() + params.num_values() * width);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in params.tensors() {
            for &v in t.data() {
                if width == 4 {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_checkpoint_bytes_with(bytes).map(|(m, _)| m)
    }

    /// Model plus the header metadata map.
    pub fn from_checkpoint_bytes_with(
        bytes: &[u8],
    ) -> Result<(Self, BTreeMap<String, String>), ModelError> {
        let bad = |msg: &str| ModelError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {}, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let width = value_width::<T>();
        let mut cursor = body_start;
        let mut named = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = cursor
                .checked_add(n * width)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = bytes[cursor..end]
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    } else {
                        T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    }
                })
                .collect();
            cursor = end;
            named.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        header.config.validate()?;
        let params = ModelParams::from_named(&header.config, named)?;
        Ok((Model::from_params(header.config, params)?, header.metadata))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.save_with(path, &BTreeMap::new())
    }

    pub fn save_with(
        &self,
        path: &Path,
        metadata: &BTreeMap<String, String>,
    ) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes_with(metadata))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::load_with(path).map(|(m, _)| m)
    }

    pub fn load_with(path: &Path) -> Result<(Self, BTreeMap<String, String>), ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes_with(&bytes)
    }
}

fn value_width<T: Scalar>() -> usize {
    if T::DTYPE == "f32" {
        4
    } else {
        8
    }
}
