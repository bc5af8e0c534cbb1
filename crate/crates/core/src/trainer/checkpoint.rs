//! Versioned binary checkpoints.
//!
//! Layout: `b"AVFTCKPT"`, format version (u32 LE), header length (u64 LE),
//! JSON header, the tensors listed in the header as little-endian `f32` in
//! header order, then the SHA-256 of every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamSpec, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"AVFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    epoch: usize,
    frozen: bool,
    config: serde_json::Value,
    meta: BTreeMap<String, serde_json::Value>,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    config: AdamConfig,
}

/// Optimizer moments saved with a resumable checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn capture(adam: &Adam<f32>) -> Self {
        let (m, v) = adam.moments();
        Self {
            step: adam.step_count(),
            config: adam.config,
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }

    pub fn restore(&self) -> Adam<f32> {
        Adam::from_state(self.config, self.step, self.m.clone(), self.v.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Which network the weights belong to (`imitator`, `perception`, ...).
    pub kind: String,
    pub epoch: usize,
    pub frozen: bool,
    pub config: serde_json::Value,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub specs: Vec<ParamSpec>,
    pub weights: Vec<Tensor<f32>>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, epoch: usize, config: serde_json::Value, store: &ParamStore<f32>) -> Self {
        Self {
            kind: kind.to_string(),
            epoch,
            frozen: store.is_frozen(),
            config,
            meta: BTreeMap::new(),
            specs: store.specs(),
            weights: store.tensors().to_vec(),
            adam: None,
        }
    }

    pub fn with_adam(mut self, adam: &Adam<f32>) -> Self {
        self.adam = Some(AdamState::capture(adam));
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.meta
            .insert(key.to_string(), serde_json::to_value(value).expect("meta values serialize"));
        self
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }

    /// Loads the weights into `store` after checking names and shapes.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.specs() != self.specs {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint layout does not match the configured network",
                self.kind
            )));
        }
        store.load(self.weights.clone())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<TensorEntry> = self
            .specs
            .iter()
            .map(|s| TensorEntry {
                group: "weights".into(),
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect();
        let mut blobs: Vec<&Tensor<f32>> = self.weights.iter().collect();
        if let Some(a) = &self.adam {
            for (group, list) in [("adam.m", &a.m), ("adam.v", &a.v)] {
                for (s, t) in self.specs.iter().zip(list) {
                    tensors.push(TensorEntry {
                        group: group.into(),
                        name: s.name.clone(),
                        shape: t.shape().to_vec(),
                    });
                    blobs.push(t);
                }
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            epoch: self.epoch,
            frozen: self.frozen,
            config: self.config.clone(),
            meta: self.meta.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                step: a.step,
                config: a.config,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64 + blobs.iter().map(|t| 4 * t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        let found = Sha256::digest(body);
        if found.as_slice() != tail {
            return Err(Error::Digest {
                what: "checkpoint content".into(),
                expected: hex::encode(tail),
                found: hex::encode(found),
            });
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut pos = hend;
        let mut groups: BTreeMap<String, Vec<Tensor<f32>>> = BTreeMap::new();
        let mut specs = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + 4 * n;
            if end > body.len() {
                return Err(bad("truncated tensor data"));
            }
            let data = body[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos = end;
            if e.group == "weights" {
                specs.push(ParamSpec {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                });
            }
            groups.entry(e.group.clone()).or_default().push(Tensor::new(&e.shape, data)?);
        }
        if pos != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let adam = match header.adam {
            Some(a) => Some(AdamState {
                step: a.step,
                config: a.config,
                m: groups.remove("adam.m").unwrap_or_default(),
                v: groups.remove("adam.v").unwrap_or_default(),
            }),
            None => None,
        };
        Ok(Self {
            kind: header.kind,
            epoch: header.epoch,
            frozen: header.frozen,
            config: header.config,
            meta: header.meta,
            specs,
            weights: groups.remove("weights").unwrap_or_default(),
            adam,
        })
    }

    /// Atomic write (temp file then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::MissingArtifact(format!("checkpoint {} ({e})", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
