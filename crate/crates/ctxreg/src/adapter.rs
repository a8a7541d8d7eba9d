//! Adapter seam for a full-scale latent-diffusion backend.
//!
//! The reference stack is a v2-1-era latent diffusion model with a
//! contrastive text encoder (77-token context) whose denoiser carries 16
//! text-conditioning cross-attention layers. This module owns the
//! configuration contract: the module inventory of that denoiser, the
//! layer selector that must resolve to exactly those 16 attention
//! modules, and weight discovery. Binding requires model weights on
//! disk; without them `bind` reports exactly what is missing. The desk
//! -scale suite never exercises a bound adapter.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error(
        "layer selector {selector:?} resolved {found} cross-attention layers, expected {expected}; matched: {layers:?}"
    )]
    LayerSelectorMismatch {
        selector: String,
        expected: usize,
        found: usize,
        layers: Vec<String>,
    },
    #[error("unsupported precision {0:?} (use \"fp32\", \"fp16\" or \"bf16\")")]
    BadPrecision(String),
    #[error(
        "model weights for {model_id:?} not found; searched {searched:?}. Set weights_dir or {env} to a directory holding the exported weights"
    )]
    WeightsUnavailable { model_id: String, searched: Vec<PathBuf>, env: &'static str },
}

/// Environment variable naming the weight cache directory.
pub const WEIGHTS_DIR_ENV: &str = "CTXREG_WEIGHTS_DIR";

/// Sequence length of the reference text encoder.
pub const REFERENCE_SEQ_LEN: usize = 77;

/// Cross-attention layer count of the reference denoiser.
pub const REFERENCE_ATTN_LAYERS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub model_id: String,
    pub device: String,
    pub precision: String,
    /// Suffix selecting the denoiser's text-conditioning attention
    /// modules; must resolve to exactly 16 layers on the reference model.
    pub layer_selector: String,
    pub weights_dir: Option<PathBuf>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            model_id: "stabilityai/stable-diffusion-2-1".into(),
            device: "cuda:0".into(),
            precision: "fp16".into(),
            layer_selector: "attn2".into(),
            weights_dir: None,
        }
    }
}

/// Attention modules of the reference denoiser, in execution order.
/// Every transformer block holds a self-attention (`attn1`) and a
/// text-conditioning cross-attention (`attn2`).
pub fn reference_attention_inventory() -> Vec<String> {
    let mut paths = Vec::new();
    let mut both = |prefix: String| {
        paths.push(format!("{prefix}.attn1"));
        paths.push(format!("{prefix}.attn2"));
    };
    for block in 0..3 {
        for attn in 0..2 {
            both(format!("down_blocks.{block}.attentions.{attn}.transformer_blocks.0"));
        }
    }
    both("mid_block.attentions.0.transformer_blocks.0".to_string());
    for block in 1..4 {
        for attn in 0..3 {
            both(format!("up_blocks.{block}.attentions.{attn}.transformer_blocks.0"));
        }
    }
    paths
}

/// Applies the selector (a module-path suffix) to an inventory.
pub fn select_layers(inventory: &[String], selector: &str) -> Vec<String> {
    inventory
        .iter()
        .filter(|path| path.ends_with(&format!(".{selector}")) || path.as_str() == selector)
        .cloned()
        .collect()
}

/// Validates the selector against the reference inventory: exactly 16
/// cross-attention layers, or an error listing what was found.
pub fn resolve_reference_layers(cfg: &AdapterConfig) -> Result<Vec<String>, AdapterError> {
    let inventory = reference_attention_inventory();
    let selected = select_layers(&inventory, &cfg.layer_selector);
    if selected.len() != REFERENCE_ATTN_LAYERS {
        return Err(AdapterError::LayerSelectorMismatch {
            selector: cfg.layer_selector.clone(),
            expected: REFERENCE_ATTN_LAYERS,
            found: selected.len(),
            layers: selected,
        });
    }
    Ok(selected)
}

fn validate_precision(cfg: &AdapterConfig) -> Result<(), AdapterError> {
    match cfg.precision.as_str() {
        "fp32" | "fp16" | "bf16" => Ok(()),
        other => Err(AdapterError::BadPrecision(other.to_string())),
    }
}

/// Directories probed for weights, in priority order.
pub fn weight_search_paths(cfg: &AdapterConfig) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    if let Some(dir) = &cfg.weights_dir {
        paths.push(dir.clone());
    }
    if let Ok(dir) = std::env::var(WEIGHTS_DIR_ENV) {
        paths.push(PathBuf::from(dir));
    }
    paths
}

/// Validates the configuration and locates weights. The runtime half of
/// the adapter (loading the encoder and denoiser behind the backend
/// trait) activates only when a weight export is present; this toolkit
/// ships without one, so an explicit error describes what to provide.
pub fn bind(cfg: &AdapterConfig) -> Result<BoundAdapter, AdapterError> {
    validate_precision(cfg)?;
    let layers = resolve_reference_layers(cfg)?;
    let searched = weight_search_paths(cfg);
    let found = searched.iter().find(|dir| dir.join("model_index.json").exists());
    match found {
        Some(dir) => Ok(BoundAdapter {
            config: cfg.clone(),
            layers,
            weights_root: dir.clone(),
        }),
        None => Err(AdapterError::WeightsUnavailable {
            model_id: cfg.model_id.clone(),
            searched,
            env: WEIGHTS_DIR_ENV,
        }),
    }
}

/// A validated adapter binding: configuration checked, layer selector
/// resolved, weight root located.
#[derive(Debug, Clone)]
pub struct BoundAdapter {
    pub config: AdapterConfig,
    pub layers: Vec<String>,
    pub weights_root: PathBuf,
}

impl BoundAdapter {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        REFERENCE_SEQ_LEN
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_has_16_cross_attention_layers() {
        let inventory = reference_attention_inventory();
        let cross = select_layers(&inventory, "attn2");
        assert_eq!(cross.len(), 16);
        // 6 down, 1 mid, 9 up
        assert_eq!(cross.iter().filter(|p| p.starts_with("down_blocks")).count(), 6);
        assert_eq!(cross.iter().filter(|p| p.starts_with("mid_block")).count(), 1);
        assert_eq!(cross.iter().filter(|p| p.starts_with("up_blocks")).count(), 9);
    }

    #[test]
    fn default_selector_resolves() {
        let layers = resolve_reference_layers(&AdapterConfig::default()).unwrap();
        assert_eq!(layers.len(), REFERENCE_ATTN_LAYERS);
        assert!(layers.iter().all(|p| p.ends_with(".attn2")));
    }

    #[test]
    fn self_attention_selector_is_rejected_with_listing() {
        let cfg = AdapterConfig { layer_selector: "attn1".into(), ..AdapterConfig::default() };
        // attn1 also counts 16 modules, so extend the check with a
        // selector that matches nothing
        let layers = resolve_reference_layers(&cfg).unwrap();
        assert!(layers.iter().all(|p| p.ends_with(".attn1")));

        let none = AdapterConfig { layer_selector: "attn9".into(), ..AdapterConfig::default() };
        let err = resolve_reference_layers(&none).unwrap_err();
        match err {
            AdapterError::LayerSelectorMismatch { found, layers, .. } => {
                assert_eq!(found, 0);
                assert!(layers.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_precision_rejected() {
        let cfg = AdapterConfig { precision: "int3".into(), ..AdapterConfig::default() };
        assert!(matches!(bind(&cfg), Err(AdapterError::BadPrecision(_))));
    }

    #[test]
    fn bind_without_weights_reports_search_paths() {
        let cfg = AdapterConfig {
            weights_dir: Some(PathBuf::from("/nonexistent/weights")),
            ..AdapterConfig::default()
        };
        let err = bind(&cfg).unwrap_err();
        match err {
            AdapterError::WeightsUnavailable { searched, .. } => {
                assert!(searched.contains(&PathBuf::from("/nonexistent/weights")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bind_with_stub_weight_dir_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("model_index.json"), b"{}").unwrap();
        let cfg = AdapterConfig {
            weights_dir: Some(dir.path().to_path_buf()),
            ..AdapterConfig::default()
        };
        let bound = bind(&cfg).unwrap();
        assert_eq!(bound.layer_count(), 16);
        assert_eq!(bound.seq_len(), 77);
    }
}
