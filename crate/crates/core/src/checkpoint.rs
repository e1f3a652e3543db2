//! Binary checkpoint: magic, version, a JSON header, the tensors as
//! little-endian f32, and a trailing SHA-256 of everything before it.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Model, ModelConfig};
use crate::error::{MarsError, Result};
use crate::params::{ParamKind, Tensor};
use crate::training::Adam;

const MAGIC: &[u8; 8] = b"MARSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_HEX_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    first: usize,
    second: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    epoch: usize,
    step: u64,
    learning_rate: f64,
    moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    init_seed: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingHeader>,
    num_values: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Optimiser state saved alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
    /// `(parameter name, first moment, second moment)`.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub tensors: Vec<NamedTensor>,
    pub training: Option<TrainingState>,
}

fn to_f32(t: &Tensor) -> Vec<f32> {
    t.iter().map(|&v| v as f32).collect()
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, training: Option<(usize, &Adam)>) -> Checkpoint {
        let store = model.store();
        let tensors = store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                kind: match e.kind {
                    ParamKind::Trainable => TensorKind::Trainable,
                    ParamKind::Buffer => TensorKind::Buffer,
                },
                shape: e.value.shape().to_vec(),
                data: to_f32(&e.value),
            })
            .collect();
        let training = training.map(|(epoch, adam)| TrainingState {
            epoch,
            step: adam.steps(),
            learning_rate: adam.learning_rate,
            moments: store
                .ids()
                .filter_map(|id| {
                    adam.moments(id)
                        .map(|(m, v)| (store.name(id).to_string(), to_f32(m), to_f32(v)))
                })
                .collect(),
        });
        Checkpoint {
            model: model.config().clone(),
            init_seed: store.seed(),
            tensors,
            training,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut values: Vec<f32> = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                kind: t.kind,
                shape: t.shape.clone(),
                offset: values.len(),
            });
            values.extend_from_slice(&t.data);
        }
        let training = self.training.as_ref().map(|tr| {
            let mut moments = Vec::with_capacity(tr.moments.len());
            for (name, m, v) in &tr.moments {
                let first = values.len();
                values.extend_from_slice(m);
                let second = values.len();
                values.extend_from_slice(v);
                moments.push(MomentEntry {
                    name: name.clone(),
                    first,
                    second,
                });
            }
            TrainingHeader {
                epoch: tr.epoch,
                step: tr.step,
                learning_rate: tr.learning_rate,
                moments,
            }
        });
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            init_seed: self.init_seed,
            tensors: entries,
            training,
            num_values: values.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + 4 * values.len() + DIGEST_HEX_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = hex(&Sha256::digest(&out));
        out.extend_from_slice(digest.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| MarsError::Checkpoint(m.to_string());
        if bytes.len() < 20 + DIGEST_HEX_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let body = &bytes[..bytes.len() - DIGEST_HEX_LEN];
        let stored = String::from_utf8_lossy(&bytes[bytes.len() - DIGEST_HEX_LEN..]).into_owned();
        let actual = hex(&Sha256::digest(body));
        if stored != actual {
            return Err(MarsError::DigestMismatch {
                expected: stored,
                actual,
            });
        }
        let version = read_u32(body, 8);
        if version != CHECKPOINT_VERSION {
            return Err(MarsError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = read_u64(body, 12) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])
            .map_err(|e| MarsError::Checkpoint(format!("header: {e}")))?;
        let data = &body[hend..];
        if data.len() != 4 * header.num_values {
            return Err(bad("data section length does not match the header"));
        }
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let slice = |offset: usize, len: usize| -> Result<Vec<f32>> {
            values
                .get(offset..offset + len)
                .map(|s| s.to_vec())
                .ok_or_else(|| bad("tensor range out of bounds"))
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut sizes = std::collections::HashMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            sizes.insert(e.name.clone(), n);
            tensors.push(NamedTensor {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.shape.clone(),
                data: slice(e.offset, n)?,
            });
        }
        let training = match header.training {
            Some(tr) => {
                let mut moments = Vec::with_capacity(tr.moments.len());
                for m in tr.moments {
                    let n = *sizes.get(&m.name).ok_or_else(|| {
                        MarsError::Checkpoint(format!("moments for unknown tensor {}", m.name))
                    })?;
                    moments.push((m.name, slice(m.first, n)?, slice(m.second, n)?));
                }
                Some(TrainingState {
                    epoch: tr.epoch,
                    step: tr.step,
                    learning_rate: tr.learning_rate,
                    moments,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            model: header.model,
            init_seed: header.init_seed,
            tensors,
            training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MarsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| MarsError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Rebuild the model. The tensor table must name exactly the parameters
    /// the stored config implies, with matching shapes.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(&self.model, self.init_seed)?;
        let expected: BTreeSet<&str> = model.store().entries().iter().map(|e| e.name.as_str()).collect();
        let found: BTreeSet<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        if expected != found {
            let missing: Vec<_> = expected.difference(&found).copied().collect();
            let extra: Vec<_> = found.difference(&expected).copied().collect();
            return Err(MarsError::Checkpoint(format!(
                "parameter table does not match the config; missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for t in &self.tensors {
            let id = model.store().id(&t.name).expect("checked above");
            let value = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.iter().map(|&v| v as f64).collect())
                .map_err(|e| MarsError::Checkpoint(format!("{}: {e}", t.name)))?;
            model
                .store_mut()
                .set(id, value)
                .map_err(|e| MarsError::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    /// Optimiser restored from the saved moments, if any.
    pub fn to_optimizer(&self, model: &Model) -> Result<Option<Adam>> {
        let Some(tr) = &self.training else {
            return Ok(None);
        };
        let store = model.store();
        let mut moments = vec![None; store.len()];
        for (name, m, v) in &tr.moments {
            let id = store
                .id(name)
                .ok_or_else(|| MarsError::Checkpoint(format!("moments for unknown parameter {name}")))?;
            let shape = store.get(id).raw_dim();
            let conv = |d: &[f32]| {
                ArrayD::from_shape_vec(shape.clone(), d.iter().map(|&x| x as f64).collect())
                    .map_err(|e| MarsError::Checkpoint(format!("{name}: {e}")))
            };
            moments[id.0] = Some((conv(m)?, conv(v)?));
        }
        let mut adam = Adam::new(tr.learning_rate);
        adam.restore(tr.step, moments);
        Ok(Some(adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_identical_round_trip() {
        let model = Model::build(&ModelConfig::toy(64), 3).unwrap();
        let a = Checkpoint::from_model(&model, None).to_bytes();
        let restored = Checkpoint::from_bytes(&a).unwrap().to_model().unwrap();
        let b = Checkpoint::from_model(&restored, None).to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_byte_is_caught() {
        let model = Model::build(&ModelConfig::toy(64), 3).unwrap();
        let mut bytes = Checkpoint::from_model(&model, None).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(MarsError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let model = Model::build(&ModelConfig::toy(64), 3).unwrap();
        let mut ck = Checkpoint::from_model(&model, None);
        ck.model.use_residual = true;
        assert!(matches!(ck.to_model(), Err(MarsError::Checkpoint(_))));
    }
}
