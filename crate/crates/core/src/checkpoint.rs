//! Versioned checkpoint container: magic, version, JSON header, then every
//! tensor as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Mat, Real};

pub const MAGIC: &[u8; 8] = b"BREPMAE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

/// Seed and step count from which every training stream can be re-derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    /// Effective configuration of the run that wrote the checkpoint.
    pub config: serde_json::Value,
    pub manifest_hash: Option<String>,
    pub rng: RngState,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Mat<f64>>,
}

impl Checkpoint {
    pub fn from_store<S: Real>(
        kind: CheckpointKind,
        config: serde_json::Value,
        manifest_hash: Option<String>,
        rng: RngState,
        store: &ParamStore<S>,
    ) -> Self {
        let tensors: Vec<Mat<f64>> = store.iter().map(|p| p.value.cast()).collect();
        let infos = store.iter().map(|p| TensorInfo { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols() }).collect();
        Self {
            header: CheckpointHeader { format_version: CHECKPOINT_VERSION, kind, config, manifest_hash, rng, tensors: infos },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.tensors.iter().map(Mat::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&format!("malformed header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let n = info.rows * info.cols;
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad(&format!("truncated data for '{}'", info.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Mat::from_vec(info.rows, info.cols, data));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Overwrites every parameter of `store` with the tensor of the same name.
    /// The checkpoint must hold exactly the store's parameters.
    pub fn restore<S: Real>(&self, store: &mut ParamStore<S>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Format(format!("checkpoint holds {} tensors, model has {}", self.tensors.len(), store.len())));
        }
        for (info, t) in self.header.tensors.iter().zip(&self.tensors) {
            let id = store.find(&info.name).ok_or_else(|| Error::Format(format!("unexpected tensor '{}'", info.name)))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Format(format!("shape mismatch for '{}'", info.name)));
            }
            *store.get_mut(id) = t.cast();
        }
        Ok(())
    }

    /// Parameters as a standalone store, in checkpoint order.
    pub fn to_store<S: Real>(&self) -> ParamStore<S> {
        let mut store = ParamStore::new();
        for (info, t) in self.header.tensors.iter().zip(&self.tensors) {
            store.add(info.name.clone(), t.cast());
        }
        store
    }
}
