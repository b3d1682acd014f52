//! Binary container for parameters, optimizer moments and latents.
//!
//! Layout: 8-byte magic `LSATCKPT`, little-endian `u64` header length, a JSON
//! header, then the raw little-endian `f32` payload. Each manifest entry gives
//! an array's byte offset into the payload and its element count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::grad::{AdamW, AdamWConfig, ParamStore};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"LSATCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("manifest inconsistent with payload: {0}")]
    Manifest(String),
    #[error("checkpoint has no array named {0}")]
    MissingArray(String),
    #[error("checkpoint kind is {found}, expected {expected}")]
    Kind { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    step: u64,
    config: Value,
    meta: BTreeMap<String, Value>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: Value,
    pub meta: BTreeMap<String, Value>,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config: Value) -> Self {
        Self { kind: kind.to_string(), step, config, meta: BTreeMap::new(), arrays: BTreeMap::new() }
    }

    pub fn put(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.arrays.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.arrays.get(name).ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind { expected: kind.to_string(), found: self.kind.clone() });
        }
        Ok(())
    }

    /// Stores every tensor of `store` under `prefix/`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.put(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Collects every array under `prefix/`.
    pub fn take_store(&self, prefix: &str) -> ParamStore<f32> {
        let lead = format!("{prefix}/");
        let mut store = ParamStore::new();
        for (name, t) in &self.arrays {
            if let Some(rest) = name.strip_prefix(&lead) {
                store.insert(rest, t.clone());
            }
        }
        store
    }

    pub fn put_optimizer(&mut self, prefix: &str, opt: &AdamW<f32>) {
        for (name, t) in &opt.first_moment {
            self.put(format!("{prefix}/m/{name}"), t.clone());
        }
        for (name, t) in &opt.second_moment {
            self.put(format!("{prefix}/v/{name}"), t.clone());
        }
        self.meta.insert(format!("{prefix}.step_count"), Value::from(opt.step_count));
    }

    pub fn take_optimizer(&self, prefix: &str, config: AdamWConfig) -> Result<AdamW<f32>, CheckpointError> {
        let key = format!("{prefix}.step_count");
        let step_count = self
            .meta
            .get(&key)
            .and_then(Value::as_u64)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing {key}")))?;
        let collect = |which: &str| {
            let lead = format!("{prefix}/{which}/");
            self.arrays
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|n| (n.to_string(), v.clone())))
                .collect::<BTreeMap<_, _>>()
        };
        Ok(AdamW { config, step_count, first_moment: collect("m"), second_moment: collect("v") })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            entries.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() as u64 });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(CheckpointError::Manifest(format!("header length {hlen} exceeds file")));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: header.format_version, expected: FORMAT_VERSION });
        }
        let payload = &body[hlen..];
        let mut arrays = BTreeMap::new();
        let mut expected_end = 0u64;
        for e in &header.arrays {
            if numel(&e.shape) as u64 != e.len {
                return Err(CheckpointError::Manifest(format!("{}: shape {:?} has {} elements, manifest says {}", e.name, e.shape, numel(&e.shape), e.len)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            if end > payload.len() || e.offset != expected_end {
                return Err(CheckpointError::Manifest(format!("{}: bytes {start}..{end} out of place", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.insert(e.name.clone(), Tensor::new(e.shape.clone(), data).expect("checked shape"));
            expected_end = end as u64;
        }
        if expected_end as usize != payload.len() {
            return Err(CheckpointError::Manifest(format!("{} trailing payload bytes", payload.len() - expected_end as usize)));
        }
        Ok(Self { kind: header.kind, step: header.step, config: header.config, meta: header.meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io { path: dir.to_path_buf(), source })?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(CheckpointError::NotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}
