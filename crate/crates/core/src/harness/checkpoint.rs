//! Checkpoints: `EMC1`, a u32 manifest length, a JSON manifest naming each
//! parameter with its byte offset, then the parameters as EMT1 tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Emil;
use crate::tensor::io::{self, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// From the start of the tensor section.
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub model: Emil<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.model.named_tensors() {
            tensors.push(TensorEntry {
                name,
                offset: blob.len() as u64,
                shape: t.shape().to_vec(),
            });
            blob.extend(io::encode(t));
        }
        let manifest = Manifest {
            config: self.config.clone(),
            best_epoch: self.best_epoch,
            best_val_balanced_accuracy: self.best_val_balanced_accuracy,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend(json);
        out.extend(blob);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected EMC1".into(),
            });
        }
        let len = r.u32()? as usize;
        let json_at = r.offset();
        let manifest: Manifest = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
            offset: json_at,
            message: format!("manifest: {e}"),
        })?;
        let base = r.offset();
        let section = &bytes[base as usize..];
        let mut model = Emil::<f32>::init(manifest.config.model.clone(), 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != manifest.tensors.len() {
            return Err(Error::Format {
                offset: json_at,
                message: format!(
                    "manifest lists {} tensors, the configured model has {}",
                    manifest.tensors.len(),
                    names.len()
                ),
            });
        }
        for ((slot, name), entry) in model.tensors_mut().into_iter().zip(&names).zip(&manifest.tensors) {
            if &entry.name != name {
                return Err(Error::Format {
                    offset: json_at,
                    message: format!("expected tensor `{name}`, manifest has `{}`", entry.name),
                });
            }
            if entry.offset as usize > section.len() {
                return Err(Error::Format {
                    offset: base + entry.offset,
                    message: format!("tensor `{name}` starts past the end of the file"),
                });
            }
            let mut tr = Reader::with_base(&section[entry.offset as usize..], base + entry.offset);
            let t = tr.tensor::<f32>()?;
            if t.shape() != slot.shape() {
                return Err(Error::Format {
                    offset: base + entry.offset,
                    message: format!("tensor `{name}` has shape {:?}, model expects {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
        }
        Ok(Self {
            config: manifest.config,
            best_epoch: manifest.best_epoch,
            best_val_balanced_accuracy: manifest.best_val_balanced_accuracy,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
