//! Checkpoint file: `u64` little-endian header length, a UTF-8 JSON header
//! (config, vocabulary, tensor manifest), then raw little-endian `f32`
//! tensor data in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, UniTabE};
use crate::numeric::{AdamState, ParamSet, Tensor};
use crate::tokenizer::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptManifest(String),
    #[error("tensor data size mismatch: {0}")]
    SizeMismatch(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    step: u64,
    seed: u64,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState<f32>>,
    pub step: u64,
    pub seed: u64,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    pub fn new(
        model: &UniTabE<f32>,
        vocab: Vocabulary,
        adam: Option<AdamState<f32>>,
        step: u64,
        seed: u64,
    ) -> Self {
        Self {
            config: model.config().clone(),
            vocab,
            params: model.params().clone(),
            adam,
            step,
            seed,
        }
    }

    pub fn model(&self) -> Result<UniTabE<f32>, PersistError> {
        Ok(UniTabE::from_params(
            self.config.clone(),
            self.params.clone(),
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: blob.len() as u64,
            });
            for x in data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(name.to_string(), t.shape().to_vec(), t.data());
        }
        if let Some(a) = &self.adam {
            for (id, (name, t)) in self.params.iter().enumerate() {
                push(format!("{ADAM_M}{name}"), t.shape().to_vec(), &a.m[id]);
            }
            for (id, (name, t)) in self.params.iter().enumerate() {
                push(format!("{ADAM_V}{name}"), t.shape().to_vec(), &a.v[id]);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            seed: self.seed,
            adam: self.adam.as_ref().map(|a| AdamHeader {
                step: a.step,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        let corrupt = |m: String| PersistError::CorruptManifest(m);
        if bytes.len() < 8 {
            return Err(corrupt(format!("file is {} bytes", bytes.len())));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let hend = 8u64
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| {
                corrupt(format!(
                    "header length {hlen} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[8..hend]).map_err(|e| corrupt(format!("header: {e}")))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(PersistError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| corrupt(format!("header: {e}")))?;
        let blob = &bytes[hend..];

        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.offset != expected_offset {
                return Err(corrupt(format!(
                    "{}: offset {} expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n as u64;
            if end > blob.len() as u64 {
                return Err(corrupt(format!("{}: data truncated", e.name)));
            }
            let data: Vec<f32> = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = end;
            tensors.push((e.name.clone(), e.shape.clone(), data));
        }
        if expected_offset != blob.len() as u64 {
            return Err(PersistError::SizeMismatch(format!(
                "{} trailing bytes after tensor data",
                blob.len() as u64 - expected_offset
            )));
        }

        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape, data) in tensors {
            if name.starts_with(ADAM_M) {
                m.push((name, data));
            } else if name.starts_with(ADAM_V) {
                v.push((name, data));
            } else {
                let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
                params
                    .register(name, t)
                    .map_err(|e| corrupt(e.to_string()))?;
            }
        }
        let adam = match header.adam {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(corrupt("optimizer moments without optimizer header".into())),
            Some(h) => {
                let order = |prefix: &str,
                             list: Vec<(String, Vec<f32>)>|
                 -> Result<Vec<Vec<f32>>, PersistError> {
                    if list.len() != params.len() {
                        return Err(corrupt(format!(
                            "{} {prefix} tensors for {} parameters",
                            list.len(),
                            params.len()
                        )));
                    }
                    list.into_iter()
                        .enumerate()
                        .map(|(id, (name, data))| {
                            if name[prefix.len()..] != *params.name(id) {
                                return Err(corrupt(format!("{name} out of order")));
                            }
                            Ok(data)
                        })
                        .collect()
                };
                let m = order(ADAM_M, m)?;
                let v = order(ADAM_V, v)?;
                Some(AdamState {
                    m,
                    v,
                    step: h.step,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                })
            }
        };
        // shapes must agree with the configured layout
        UniTabE::from_params(header.config.clone(), params.clone())
            .map_err(|e| PersistError::SizeMismatch(e.to_string()))?;
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            params,
            adam,
            step: header.step,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PersistError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PersistError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
