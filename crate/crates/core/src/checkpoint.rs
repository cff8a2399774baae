//! Binary checkpoint container.
//!
//! Layout: magic `TGCK`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in the
//! order listed by the header. The header carries the run config and its
//! SHA-256 hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nets::{ParamSet, RunningStats};
use crate::train::{AdamState, ExperimentConfig, Models};

pub const MAGIC: &[u8; 4] = b"TGCK";
pub const VERSION: u32 = 1;

const NETS: [&str; 3] = ["generator", "spatial", "temporal"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Completed outer iterations.
    pub iteration: usize,
    pub models: Models,
    /// Optimizer state for generator, spatial and temporal networks.
    pub optimizers: [AdamState; 3],
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: [usize; 5],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    config_hash: String,
    iteration: usize,
    adam_steps: [u64; 3],
    norms: Vec<Vec<RunningStats>>,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the config's canonical JSON form.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sets(models: &Models) -> [&ParamSet; 3] {
    models.param_sets()
}

impl Checkpoint {
    /// Initial checkpoint of a fresh run.
    pub fn initial(config: ExperimentConfig) -> Result<Self> {
        Ok(crate::train::Trainer::new(config)?.checkpoint())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Tensor<f32>> = Vec::new();
        for (k, set) in sets(&self.models).into_iter().enumerate() {
            let opt = &self.optimizers[k];
            for (i, p) in set.params.iter().enumerate() {
                for (suffix, t) in [("", &p.value), ("#m", &opt.m[i]), ("#v", &opt.v[i])] {
                    tensors.push(TensorEntry {
                        key: format!("{}/{}{suffix}", NETS[k], p.name),
                        shape: t.shape(),
                    });
                    blobs.push(t);
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            iteration: self.iteration,
            adam_steps: [0, 1, 2].map(|k| self.optimizers[k].step),
            norms: sets(&self.models).iter().map(|s| s.norms.clone()).collect(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(
            16 + json.len() + blobs.iter().map(|t| 4 * t.numel()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        if config_hash(&header.config) != header.config_hash {
            return Err(bad("stored config does not match its hash".into()));
        }
        header.config.validate()?;
        let mut models = Models::zeros(&header.config.model)?;
        let mut optimizers = models.param_sets().map(AdamState::new);
        let mut blob = &bytes[16 + len..];
        let mut entries = header.tensors.iter();
        let sets = [
            &mut models.generator.params,
            &mut models.spatial.params,
            &mut models.temporal.params,
        ];
        for (k, set) in sets.into_iter().enumerate() {
            let norms = header
                .norms
                .get(k)
                .ok_or_else(|| bad("missing normalization statistics".into()))?;
            if norms.len() != set.norms.len()
                || norms
                    .iter()
                    .zip(&set.norms)
                    .any(|(a, b)| a.name != b.name || a.mean.len() != b.mean.len())
            {
                return Err(bad(format!("{} normalization layout differs", NETS[k])));
            }
            set.norms = norms.clone();
            let opt = &mut optimizers[k];
            opt.step = header.adam_steps[k];
            for (i, p) in set.params.iter_mut().enumerate() {
                for (suffix, dst) in [
                    ("", &mut p.value),
                    ("#m", &mut opt.m[i]),
                    ("#v", &mut opt.v[i]),
                ] {
                    let key = format!("{}/{}{suffix}", NETS[k], p.name);
                    let e = entries
                        .next()
                        .ok_or_else(|| bad(format!("missing tensor {key}")))?;
                    if e.key != key || e.shape != dst.shape() {
                        return Err(bad(format!(
                            "tensor {} {:?} where {key} {:?} was expected",
                            e.key,
                            e.shape,
                            dst.shape()
                        )));
                    }
                    let n = dst.numel();
                    let raw = blob
                        .get(..4 * n)
                        .ok_or_else(|| bad("truncated tensor data".into()))?;
                    for (v, c) in dst.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                        *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                    }
                    blob = &blob[4 * n..];
                }
            }
        }
        if entries.next().is_some() || !blob.is_empty() {
            return Err(bad("trailing data".into()));
        }
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            models,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Loads a checkpoint and rejects it unless it was written for exactly
    /// `expected`.
    pub fn load_for(path: &Path, expected: &ExperimentConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if config_hash(&ck.config) != config_hash(expected) {
            return Err(Error::Config(format!(
                "{} was written for a different configuration",
                path.display()
            )));
        }
        Ok(ck)
    }
}
