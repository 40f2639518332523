//! Checkpoint container: magic, version, a JSON index, then the tensors as
//! one contiguous little-endian `f64` payload in row-major order.
//!
//! ```text
//! b"NCDSSMCK" | u32 version | u64 index length | index JSON | payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Adam, Model, Trainer};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"NCDSSMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Group {
    Param,
    Buffer,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
    /// Byte offset into the payload.
    offset: usize,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    config: RunConfig,
    step: usize,
    rng: ChaCha8Rng,
    adam_counts: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

const DTYPE: &str = "f64-le";

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub store: ParamStore,
    pub adam: Adam,
}

fn corrupt(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

impl Checkpoint {
    /// Snapshot of a trainer; `config.train` is replaced by the trainer's.
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Self {
        let mut config = config.clone();
        config.model = trainer.model.config.clone();
        config.train = trainer.config.clone();
        Self {
            config,
            step: trainer.step,
            rng: trainer.rng.clone(),
            store: trainer.store.clone(),
            adam: trainer.adam.clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::attach(&self.config.model, &self.store)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let model = self.model()?;
        let mut trainer = Trainer::new(model, self.store, self.config.train)?;
        trainer.step = self.step;
        trainer.rng = self.rng;
        trainer.adam = self.adam;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let groups: [(Group, Vec<(&String, &Matrix)>); 4] = [
            (Group::Param, self.store.params().collect()),
            (Group::Buffer, self.store.buffers().collect()),
            (Group::AdamFirst, self.adam.first.iter().collect()),
            (Group::AdamSecond, self.adam.second.iter().collect()),
        ];
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, items) in &groups {
            for (name, m) in items {
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    group: *group,
                    rows: m.nrows(),
                    cols: m.ncols(),
                    offset: payload.len(),
                    dtype: DTYPE.into(),
                });
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        payload.extend_from_slice(&m[(i, j)].to_le_bytes());
                    }
                }
            }
        }
        let index = Index {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            adam_counts: self.adam.counts.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&index).expect("index serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let index_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let index_end = usize::try_from(index_len)
            .ok()
            .and_then(|n| n.checked_add(20))
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| corrupt("index runs past the end of the file"))?;
        let index: Index = serde_json::from_slice(&bytes[20..index_end])?;
        index.config.validate()?;
        let payload = &bytes[index_end..];
        let mut store = ParamStore::new();
        let mut adam = Adam { counts: index.adam_counts, ..Adam::default() };
        let mut expected = 0usize;
        for t in &index.tensors {
            if t.dtype != DTYPE {
                return Err(corrupt(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
            }
            let len = t.rows.checked_mul(t.cols).and_then(|n| n.checked_mul(8));
            if t.offset != expected || len.is_none_or(|n| t.offset + n > payload.len()) {
                return Err(corrupt(format!("tensor `{}` lies outside the payload", t.name)));
            }
            let n = len.expect("checked above");
            let chunk = &payload[t.offset..t.offset + n];
            let values = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
            let m = Matrix::from_row_iterator(t.rows, t.cols, values);
            let duplicate = match t.group {
                Group::Param => {
                    let seen = store.contains(&t.name);
                    store.insert(t.name.clone(), m);
                    seen
                }
                Group::Buffer => {
                    let seen = store.buffers().any(|(k, _)| *k == t.name);
                    store.insert_buffer(t.name.clone(), m);
                    seen
                }
                Group::AdamFirst => adam.first.insert(t.name.clone(), m).is_some(),
                Group::AdamSecond => adam.second.insert(t.name.clone(), m).is_some(),
            };
            if duplicate {
                return Err(corrupt(format!("tensor `{}` appears twice", t.name)));
            }
            expected = t.offset + n;
        }
        if expected != payload.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        Ok(Self { config: index.config, step: index.step, rng: index.rng, store, adam })
    }

    /// Writes through a temporary file so an interrupted save keeps the old one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
