//! Checkpoint directories.
//!
//! ```text
//! meta.json            stage, dims, vocabulary hash, progress
//! vocab.json
//! params/<name>.ten1
//! optim.json           AdamW hyperparameters and step (optional)
//! optim/m/<name>.ten1
//! optim/v/<name>.ten1
//! ```
//!
//! Tensors are stored as f32. Parameters and optimizer moments are kept
//! f32-exact in memory, so save → load → save reproduces every byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelDims;
use crate::corpus::Vocabulary;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::ten1::{self, Ten1Error};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Ten1(#[from] Ten1Error),
    #[error("checkpoint at {0} not found")]
    Missing(String),
    #[error("incompatible checkpoint: {}", .0.join("; "))]
    Incompatible(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub dims: ModelDims,
    pub vocab_hash: String,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Where training resumes: epoch and batch index within it.
    pub epoch: usize,
    pub next_batch: usize,
    pub best: Option<BestScore>,
    /// Stage 2 only: tensors initialized from Stage 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pretrained: Vec<String>,
}

/// Validation result of the best epoch so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestScore {
    pub epoch: usize,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
}

impl BestScore {
    /// Higher BLEU-4 wins when both have one; otherwise, and on ties, lower
    /// loss wins.
    pub fn beats(&self, other: &BestScore) -> bool {
        if let (Some(a), Some(b)) = (self.bleu4, other.bleu4) {
            if a != b {
                return a > b;
            }
        }
        self.val_loss < other.val_loss
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optim: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct OptimFile {
    config: AdamWConfig,
    step: u64,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CheckpointError> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CheckpointError> {
    let s = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&s).map_err(|source| CheckpointError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn write_tensors<'a>(
    dir: &Path,
    tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (name, t) in tensors {
        ten1::write(&dir.join(format!("{name}.ten1")), t)?;
    }
    Ok(())
}

fn read_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if let Some(name) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".ten1"))
        {
            out.insert(name.to_string(), ten1::read(&path)?);
        }
    }
    Ok(out)
}

/// Writes into a sibling temp directory, then swaps it into place.
pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let tmp = PathBuf::from(format!("{}.tmp", dir.display()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io(&tmp))?;
    write_json(&tmp.join("meta.json"), &ckpt.meta)?;
    write_json(&tmp.join("vocab.json"), &ckpt.vocab)?;
    write_tensors(&tmp.join("params"), ckpt.params.iter())?;
    if let Some(opt) = &ckpt.optim {
        write_json(
            &tmp.join("optim.json"),
            &OptimFile {
                config: opt.config,
                step: opt.step,
            },
        )?;
        write_tensors(&tmp.join("optim").join("m"), opt.m.iter())?;
        write_tensors(&tmp.join("optim").join("v"), opt.v.iter())?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io(dir))
}

pub fn load(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    if !dir.join("meta.json").is_file() {
        return Err(CheckpointError::Missing(dir.display().to_string()));
    }
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
    if vocab.hash() != meta.vocab_hash {
        return Err(CheckpointError::Incompatible(vec![format!(
            "vocab.json hash {} != meta vocab_hash {}",
            vocab.hash(),
            meta.vocab_hash
        )]));
    }
    let mut params = ParamStore::new();
    for (name, t) in read_tensors(&dir.join("params"))? {
        params.insert(name, t);
    }
    let optim = if dir.join("optim.json").is_file() {
        let f: OptimFile = read_json(&dir.join("optim.json"))?;
        Some(AdamW {
            config: f.config,
            step: f.step,
            m: read_tensors(&dir.join("optim").join("m"))?,
            v: read_tensors(&dir.join("optim").join("v"))?,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        meta,
        vocab,
        params,
        optim,
    })
}

/// Lists every difference between a checkpoint and the current run.
pub fn check_compatible(
    meta: &CheckpointMeta,
    dims: &ModelDims,
    vocab_hash: &str,
) -> Result<(), CheckpointError> {
    let mut diffs = Vec::new();
    let a = serde_json::to_value(&meta.dims).expect("serializable");
    let b = serde_json::to_value(dims).expect("serializable");
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                diffs.push(format!(
                    "dims.{k}: checkpoint {va} vs config {}",
                    b.get(k).unwrap_or(&serde_json::Value::Null)
                ));
            }
        }
    }
    if meta.vocab_hash != vocab_hash {
        diffs.push(format!(
            "vocab hash: checkpoint {} vs data {}",
            meta.vocab_hash, vocab_hash
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::Incompatible(diffs))
    }
}
