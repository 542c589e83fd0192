//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//! `b"VQATCKPT"`, `u32` version, `u64` metadata length, metadata JSON,
//! `u32` tensor count, then per tensor (sorted by name) `u32` name length,
//! UTF-8 name, `u32` ndim (always 2), `u64` rows, `u64` cols, `f32` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{VqaT, VqaTConfig, ANSWER_BACKBONE_PREFIX, QUESTION_BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"VQATCKPT";
const VERSION: u32 = 1;

/// JSON block stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: VqaTConfig,
    /// Tokenizer vocabulary, special tokens excluded.
    pub vocabulary: Vec<String>,
    pub phase: String,
    pub step: u64,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub val_metric: Option<f64>,
    /// Echo of the training configuration that produced the weights.
    #[serde(default)]
    pub train_config: serde_json::Value,
    /// Answer vocabulary the weights were finetuned against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_vocabulary: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

/// What a partial load did besides copying matching keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Answer-backbone keys initialized from their question-backbone twins.
    pub transferred: Vec<String>,
    /// Keys absent from the archive that kept their fresh initialization.
    pub missing: Vec<String>,
    /// Archive keys the model has no use for.
    pub ignored: Vec<String>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(ck(format!(
                    "tensor {name} has {} values for {}×{}",
                    t.data.len(),
                    t.rows,
                    t.cols
                )));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ck("not a checkpoint archive"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ck(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ck("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()?;
            if ndim != 2 {
                return Err(ck(format!("tensor {name} has {ndim} dimensions")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| ck("tensor size overflows"))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| ck("tensor size overflows"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors
                .insert(name.clone(), StoredTensor { rows, cols, data })
                .is_some()
            {
                return Err(ck(format!("tensor {name} appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(ck("trailing bytes after the last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ck("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

fn to_matrix<T: Scalar>(t: &StoredTensor) -> Result<Matrix<T>> {
    Matrix::from_vec(
        t.rows,
        t.cols,
        t.data.iter().map(|&v| T::of(v as f64)).collect(),
    )
}

impl<T: Scalar> VqaT<T> {
    /// Snapshot of all parameters whose name passes `keep`.
    pub fn to_checkpoint_filtered(
        &self,
        meta: CheckpointMeta,
        keep: impl Fn(&str) -> bool,
    ) -> Checkpoint {
        let tensors = self
            .params()
            .iter()
            .filter(|(_, name, _)| keep(name))
            .map(|(_, name, m)| {
                let data = m.data().iter().map(|v| v.as_f64() as f32).collect();
                (
                    name.to_string(),
                    StoredTensor {
                        rows: m.rows(),
                        cols: m.cols(),
                        data,
                    },
                )
            })
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        self.to_checkpoint_filtered(meta, |_| true)
    }

    /// Copies archive tensors into the model.
    ///
    /// Strict loading requires the key sets to match exactly. With
    /// `allow_partial`, missing answer-backbone keys are taken from the
    /// question backbone, other missing keys keep their current values and
    /// unknown keys are skipped. Shapes must always agree.
    pub fn load_checkpoint(
        &mut self,
        ckpt: &Checkpoint,
        allow_partial: bool,
    ) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let names: Vec<String> = self
            .params()
            .iter()
            .map(|(_, n, _)| n.to_string())
            .collect();
        report.ignored = ckpt
            .tensors
            .keys()
            .filter(|k| self.params().id(k).is_none())
            .cloned()
            .collect();
        let mut updates = Vec::new();
        for name in &names {
            if let Some(t) = ckpt.tensors.get(name) {
                updates.push((name.clone(), to_matrix::<T>(t)?));
                report.loaded.push(name.clone());
                continue;
            }
            let twin = name
                .strip_prefix(ANSWER_BACKBONE_PREFIX)
                .map(|rest| format!("{QUESTION_BACKBONE_PREFIX}{rest}"))
                .and_then(|k| ckpt.tensors.get(&k));
            match twin {
                Some(t) if allow_partial => {
                    updates.push((name.clone(), to_matrix::<T>(t)?));
                    report.transferred.push(name.clone());
                }
                _ => report.missing.push(name.clone()),
            }
        }
        if !allow_partial && (!report.missing.is_empty() || !report.ignored.is_empty()) {
            return Err(ck(format!(
                "key mismatch: missing [{}], unexpected [{}]",
                report.missing.join(", "),
                report.ignored.join(", ")
            )));
        }
        report.loaded.sort();
        report.transferred.sort();
        report.missing.sort();
        for (name, value) in updates {
            let id = self.params().id(&name).expect("name comes from the store");
            self.params_mut().set(id, value)?;
        }
        Ok(report)
    }

    /// Builds a model from the archive's own configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, allow_partial: bool) -> Result<(Self, LoadReport)> {
        let mut model = Self::new(ckpt.meta.model.clone())?;
        let report = model.load_checkpoint(ckpt, allow_partial)?;
        Ok((model, report))
    }
}
