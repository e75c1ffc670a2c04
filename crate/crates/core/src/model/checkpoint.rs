//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "FRCK"
//! version    u32       currently 1
//! header_len u64       byte length of the JSON header
//! header     JSON      {"model": ModelConfig, "stage", "epoch", "val_loss",
//!                       "tensors": [{"name", "shape", "trainable"}, ...]}
//! payload    f32 × Σ   tensor values in header order, row-major
//! ```
//!
//! Tensor order is the model's parameter visiting order (encoder layers, then
//! the head); names are checked on load.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SiameseModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    #[serde(skip)]
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Training stage that produced the parameters, e.g. `f1fl` or `all`.
    pub stage: String,
    pub epoch: Option<usize>,
    pub val_loss: Option<f64>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &mut SiameseModel, stage: &str, epoch: Option<usize>, val_loss: Option<f64>) -> Self {
        let mut tensors = Vec::new();
        model.visit_params(&mut |p| {
            tensors.push(TensorRecord {
                name: p.name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
                values: p.value.clone(),
            })
        });
        Self {
            model: model.config().clone(),
            stage: stage.to_string(),
            epoch,
            val_loss,
            tensors,
        }
    }

    /// Rebuilds the model and copies every stored tensor into it.
    pub fn to_model(&self) -> Result<SiameseModel> {
        let mut model = SiameseModel::new(self.model.clone())?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut SiameseModel) -> Result<()> {
        let mut i = 0usize;
        let mut err = None;
        model.visit_params(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(i) {
                Some(t) if t.name == p.name && t.shape == p.shape => {
                    p.value.copy_from_slice(&t.values);
                }
                Some(t) => {
                    err = Some(Error::Format(format!(
                        "tensor {i}: checkpoint has {} {:?}, model expects {} {:?}",
                        t.name, t.shape, p.name, p.shape
                    )))
                }
                None => err = Some(Error::Format(format!("checkpoint is missing tensor {}", p.name))),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {i}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(self)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            buf.reserve(t.values.len() * 4);
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let header_len = u64::from_le_bytes(u64buf) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let mut ckpt: Checkpoint = serde_json::from_slice(&header)?;
        for t in &mut ckpt.tensors {
            let n: usize = t.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            t.values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn roundtrip_restores_identical_parameters() {
        let cfg = ModelConfig {
            input_dims: [16; 3],
            input_pool: 1,
            seed: 7,
            ..ModelConfig::default()
        };
        let mut m = SiameseModel::new(cfg).unwrap();
        let ckpt = Checkpoint::from_model(&mut m, "f1fl", Some(3), Some(0.25));
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut m2 = back.to_model().unwrap();
        let mut a = Vec::new();
        m.visit_params(&mut |p| a.push(p.value.clone()));
        let mut b = Vec::new();
        m2.visit_params(&mut |p| b.push(p.value.clone()));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(Checkpoint::read_from(&b"NOPE\x01\0\0\0"[..]).is_err());
        assert!(Checkpoint::read_from(&b"FRCK\x02\0\0\0\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let mut small = SiameseModel::new(ModelConfig {
            input_dims: [16; 3],
            input_pool: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut ckpt = Checkpoint::from_model(&mut small, "all", None, None);
        ckpt.tensors.pop();
        assert!(matches!(ckpt.to_model(), Err(Error::Format(_))));
    }
}
