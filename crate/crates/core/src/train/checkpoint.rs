//! Versioned binary checkpoints: magic, version, JSON header, then raw
//! little-endian `f64` parameters and moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::config::content_hash;
use crate::data::FieldSchema;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Normalizer};

const MAGIC: &[u8; 8] = b"MRCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    step: u64,
    model: ModelConfig,
    schema: FieldSchema,
    dim: usize,
    normalizer: Normalizer,
    train: TrainConfig,
    tensors: Vec<TensorInfo>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub schema: FieldSchema,
    pub dim: usize,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub optimizer: AdamW,
    pub config_hash: String,
}

/// Hash of the model and training configuration.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = serde_json::to_string(&(model, train)).expect("configs serialize");
    content_hash(text.as_bytes())
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &AdamW, train: &TrainConfig) -> Self {
        Self {
            model_config: model.config.clone(),
            schema: model.schema.clone(),
            dim: model.dim,
            normalizer: model.normalizer.clone(),
            train: train.clone(),
            names: model.params.names().to_vec(),
            params: model.params.tensors().to_vec(),
            optimizer: optimizer.clone(),
            config_hash: config_hash(&model.config, train),
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Rebuilds the model and loads the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(
            self.model_config.clone(),
            self.schema.clone(),
            self.dim,
            self.normalizer.clone(),
        )?;
        let named: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        m.load_parameters(&named)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config_hash: self.config_hash.clone(),
            step: self.optimizer.step,
            model: self.model_config.clone(),
            schema: self.schema.clone(),
            dim: self.dim,
            normalizer: self.normalizer.clone(),
            train: self.train.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| TensorInfo {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            for t in group.iter() {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file shorter than its magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| Error::Checkpoint("missing version".into()))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("missing header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("header truncated".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        r = &r[len..];
        let scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if r.len() != 3 * scalars * 8 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, expected {}",
                r.len(),
                3 * scalars * 8
            )));
        }
        let mut groups = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut g = Vec::with_capacity(header.tensors.len());
            for info in &header.tensors {
                let n = info.rows * info.cols;
                let data = r[..n * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                r = &r[n * 8..];
                g.push(Tensor::from_vec(info.rows, info.cols, data)?);
            }
            groups.push(g);
        }
        let v = groups.pop().expect("three groups");
        let m = groups.pop().expect("three groups");
        let params = groups.pop().expect("three groups");
        let expected = config_hash(&header.model, &header.train);
        if expected != header.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match stored configuration ({expected})",
                header.config_hash
            )));
        }
        Ok(Self {
            model_config: header.model,
            schema: header.schema,
            dim: header.dim,
            normalizer: header.normalizer,
            train: header.train,
            names: header.tensors.into_iter().map(|t| t.name).collect(),
            params,
            optimizer: AdamW {
                m,
                v,
                step: header.step,
            },
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
