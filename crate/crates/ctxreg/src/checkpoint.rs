//! Checkpoint bundles and sidecar embeddings.
//!
//! Checkpoints are JSON: the shortest-round-trip float encoding restores
//! every `f64` bit-exactly, and the format stays inspectable. Writes go
//! through a temp file in the target directory followed by a rename, so
//! a crash never leaves a half-written bundle behind.

use crate::embedding::ConceptEmbedding;
use crate::prompts::ConceptSpec;
use crate::toy::ToyConfig;
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint is from stage {found}, expected stage {expected}")]
    WrongStage { expected: u8, found: u8 },
    #[error("checkpoint vector length {len} does not match dim {dim}")]
    DimMismatch { len: usize, dim: usize },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Learned state of a training run: the concept vector with its history,
/// the stage marker, and (after stage 2) the denoiser weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBundle {
    pub version: u32,
    pub stage: u8,
    pub concept: ConceptSpec,
    pub step: u64,
    pub dim: usize,
    pub vector: Vec<f64>,
    pub norm_history: Vec<(u64, f64)>,
    pub seed: u64,
    /// Backend the bundle was trained on; restores the frozen weights.
    pub toy_config: Option<ToyConfig>,
    /// Fine-tuned denoiser weights, present once stage 2 has run.
    pub denoiser: Option<Vec<WeightEntry>>,
}

impl CheckpointBundle {
    pub fn concept_embedding(&self) -> Result<ConceptEmbedding, CheckpointError> {
        if self.vector.len() != self.dim {
            return Err(CheckpointError::DimMismatch { len: self.vector.len(), dim: self.dim });
        }
        Ok(ConceptEmbedding {
            vector: Array1::from_vec(self.vector.clone()),
            step: self.step,
            norm_history: self.norm_history.clone(),
        })
    }

    pub fn require_stage(&self, expected: u8) -> Result<(), CheckpointError> {
        if self.stage != expected {
            return Err(CheckpointError::WrongStage { expected, found: self.stage });
        }
        Ok(())
    }

    /// Digest over the serialized bundle, for tamper/rewrite assertions.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize().into()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CheckpointError> {
        std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            action: "create",
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join(CHECKPOINT_FILE);
        write_atomic(&path, &serde_json::to_vec_pretty(self).expect("serialize"))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let path = dir.join(CHECKPOINT_FILE);
        let bytes = std::fs::read(&path).map_err(|source| CheckpointError::Io {
            action: "read",
            path: path.display().to_string(),
            source,
        })?;
        let bundle: CheckpointBundle =
            serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        if bundle.version != FORMAT_VERSION {
            return Err(CheckpointError::Version(bundle.version));
        }
        if bundle.vector.len() != bundle.dim {
            return Err(CheckpointError::DimMismatch {
                len: bundle.vector.len(),
                dim: bundle.dim,
            });
        }
        Ok(bundle)
    }
}

/// Write-temp-then-rename within the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).map_err(|source| CheckpointError::Io {
        action: "write",
        path: tmp.display().to_string(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| CheckpointError::Io {
        action: "rename",
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Per-prompt refined embedding, written next to the checkpoint and
/// picked up by generation when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEmbedding {
    pub prompt: String,
    pub prompt_sha256: String,
    pub dim: usize,
    pub vector: Vec<f64>,
}

pub const SIDECAR_DIR: &str = "refined";

pub fn prompt_hash(prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl SidecarEmbedding {
    pub fn new(prompt: &str, vector: &Array1<f64>) -> Self {
        Self {
            prompt: prompt.to_string(),
            prompt_sha256: prompt_hash(prompt),
            dim: vector.len(),
            vector: vector.to_vec(),
        }
    }

    pub fn path_for(ckpt_dir: &Path, prompt: &str) -> PathBuf {
        ckpt_dir.join(SIDECAR_DIR).join(format!("{}.json", prompt_hash(prompt)))
    }

    pub fn save(&self, ckpt_dir: &Path) -> Result<PathBuf, CheckpointError> {
        let dir = ckpt_dir.join(SIDECAR_DIR);
        std::fs::create_dir_all(&dir).map_err(|source| CheckpointError::Io {
            action: "create",
            path: dir.display().to_string(),
            source,
        })?;
        let path = Self::path_for(ckpt_dir, &self.prompt);
        write_atomic(&path, &serde_json::to_vec_pretty(self).expect("serialize"))?;
        Ok(path)
    }

    pub fn load_for(ckpt_dir: &Path, prompt: &str) -> Result<Option<Self>, CheckpointError> {
        let path = Self::path_for(ckpt_dir, prompt);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|source| CheckpointError::Io {
            action: "read",
            path: path.display().to_string(),
            source,
        })?;
        let sidecar = serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Some(sidecar))
    }
}
