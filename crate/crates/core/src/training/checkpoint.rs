//! Binary checkpoint container.
//!
//! ```text
//! "PLCK" | version u32 | meta_len u64 | meta (JSON, meta_len bytes)
//!        | count u32 | count × { name_len u32 | name | ndim u32 | dims u64… | f64 data }
//! ```
//! All integers and floats are little-endian. Tensor groups are prefixed
//! `best/`, `current/`, `adam_m/` and `adam_v/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamState;
use super::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    pub next_epoch: usize,
    pub best_epoch: usize,
    pub best_val_macro_auc: f64,
}

/// Best-validation model plus everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
    pub resume: ResumeState,
    pub log: Vec<EpochRecord>,
    pub dataset_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    optimizer_step: u64,
    next_epoch: usize,
    best_epoch: usize,
    best_val_macro_auc: f64,
    /// Shuffling is keyed by `(seed, epoch)`, so this is the full RNG state.
    rng: RngState,
    log: Vec<EpochRecord>,
    log_digest: String,
    dataset_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

pub fn log_digest(log: &[EpochRecord]) -> String {
    let text = serde_json::to_string(log).expect("log serializes");
    hex_sha256(text.as_bytes())
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn log_digest(&self) -> String {
        log_digest(&self.log)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            format_version: VERSION,
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            optimizer_step: self.resume.adam.step,
            next_epoch: self.resume.next_epoch,
            best_epoch: self.resume.best_epoch,
            best_val_macro_auc: self.resume.best_val_macro_auc,
            rng: RngState {
                seed: self.train_config.seed,
                next_epoch: self.resume.next_epoch,
            },
            log: self.log.clone(),
            log_digest: self.log_digest(),
            dataset_digest: self.dataset_digest.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("meta serializes");
        let names: Vec<String> = self.model.tensors().into_iter().map(|(n, _)| n).collect();
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in self.model.tensors() {
            entries.push((format!("best/{n}"), t));
        }
        for (group, ts) in [
            ("current", &self.resume.params),
            ("adam_m", &self.resume.adam.m),
            ("adam_v", &self.resume.adam.v),
        ] {
            for (n, t) in names.iter().zip(ts) {
                entries.push((format!("{group}/{n}"), t));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version} (supported: {VERSION})")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.format_version != VERSION {
            return Err(Error::Format("checkpoint metadata version disagrees with header".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        if log_digest(&meta.log) != meta.log_digest {
            return Err(Error::Format("training log digest mismatch".into()));
        }

        let mut model = Model::init(meta.model_config.clone())?;
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let mut lookup = std::collections::BTreeMap::new();
        for (n, t) in tensors {
            if lookup.insert(n.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {n}")));
            }
        }
        let mut group = |prefix: &str, like: &[&Tensor]| -> Result<Vec<Tensor>> {
            names
                .iter()
                .zip(like)
                .map(|(n, l)| {
                    let key = format!("{prefix}/{n}");
                    let t = lookup.remove(&key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
                    if t.shape() != l.shape() {
                        return Err(Error::Format(format!("{key}: shape {:?}, expected {:?}", t.shape(), l.shape())));
                    }
                    Ok(t)
                })
                .collect()
        };
        let like: Vec<Tensor> = model.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let like: Vec<&Tensor> = like.iter().collect();
        let best = group("best", &like)?;
        let params = group("current", &like)?;
        let m = group("adam_m", &like)?;
        let v = group("adam_v", &like)?;
        if let Some(extra) = lookup.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(best) {
            *dst = src;
        }
        Ok(Checkpoint {
            model,
            train_config: meta.train_config,
            resume: ResumeState {
                params,
                adam: AdamState {
                    m,
                    v,
                    step: meta.optimizer_step,
                },
                next_epoch: meta.next_epoch,
                best_epoch: meta.best_epoch,
                best_val_macro_auc: meta.best_val_macro_auc,
            },
            log: meta.log,
            dataset_digest: meta.dataset_digest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
