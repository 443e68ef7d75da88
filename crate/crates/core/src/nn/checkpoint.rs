//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PNCKPT\0\0"
//! version  u32      currently 1
//! hlen     u32      length of the JSON header
//! header   hlen     {"scalar":"f32"|"f64","config":{..},"tensors":[{"name":..,"len":..},..]}
//! payload           every tensor's elements in header order, scalar-width LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{TransformerModel, Weights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"PNCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    scalar: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

impl<T: Scalar> TransformerModel<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.weights.tensors();
        let header = Header {
            scalar: T::NAME.to_string(),
            config: *self.config(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    len: t.len(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + hjson.len() + self.weights.parameter_count() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in tensors {
            for &x in t {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_end = 16 + hlen;
        if bytes.len() < header_end {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        if header.scalar != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} weights, expected {}",
                header.scalar,
                T::NAME
            )));
        }
        header.config.validate()?;
        let mut weights = Weights::<T>::zeros(&header.config);
        let mut offset = header_end;
        {
            let slots = weights.tensors_mut();
            if slots.len() != header.tensors.len() {
                return Err(bad("tensor count mismatch"));
            }
            for (slot, entry) in slots.into_iter().zip(&header.tensors) {
                if slot.name != entry.name || slot.data.len() != entry.len {
                    return Err(Error::Checkpoint(format!("unexpected tensor {}", entry.name)));
                }
                let need = entry.len * T::BYTES;
                if bytes.len() < offset + need {
                    return Err(bad("truncated payload"));
                }
                for (i, x) in slot.data.iter_mut().enumerate() {
                    *x = T::read_le(&bytes[offset + i * T::BYTES..]);
                }
                offset += need;
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        TransformerModel::from_weights(header.config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = TransformerModel::<f64>::new(ModelConfig {
            seed: 9,
            tie_embeddings: false,
            ..ModelConfig::desk(40)
        })
        .unwrap();
        let back = TransformerModel::<f64>::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);

        let m32 = TransformerModel::<f32>::new(ModelConfig::desk(40)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m32.save(&path).unwrap();
        assert_eq!(TransformerModel::<f32>::load(&path).unwrap(), m32);
    }

    #[test]
    fn rejects_wrong_scalar_and_corruption() {
        let m = TransformerModel::<f32>::new(ModelConfig::desk(40)).unwrap();
        let bytes = m.to_bytes();
        assert!(TransformerModel::<f64>::from_bytes(&bytes).is_err());
        assert!(TransformerModel::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TransformerModel::<f32>::from_bytes(&bad).is_err());
    }
}
