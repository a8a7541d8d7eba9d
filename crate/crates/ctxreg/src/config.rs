//! Application configuration: TOML file + CLI overrides + defaults.
//!
//! Precedence is CLI flag > config file > built-in default. Every
//! seeded component derives its stream from the single root seed, so a
//! config + seed pair pins every subcommand's output. Unknown keys are
//! rejected; validation errors name the offending key.

use crate::adapter::AdapterConfig;
use crate::backend::MeanMode;
use crate::embedding::RescaleWindow;
use crate::losses::LossWeights;
use crate::prompts::{
    load_prompt_set, shipped_eval_set, shipped_regularization_set, Audience, ConceptSpec,
    PromptSet, PromptTemplate,
};
use crate::refine::RefinementConfig;
use crate::toy::ToyConfig;
use crate::train::{AttnRefLatent, CoreOptions, StageConfig, Trainable};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("config key {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub encoder_layers: usize,
    pub denoiser_attn_layers: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub schedule_steps: usize,
    /// Weight-init seed; the root seed when unset.
    pub seed: Option<u64>,
}

impl Default for ToySection {
    fn default() -> Self {
        let d = ToyConfig::default();
        Self {
            vocab_size: d.vocab_size,
            embed_dim: d.embed_dim,
            seq_len: d.seq_len,
            encoder_layers: d.encoder_layers,
            denoiser_attn_layers: d.denoiser_attn_layers,
            latent_height: d.latent_height,
            latent_width: d.latent_width,
            latent_channels: d.latent_channels,
            schedule_steps: d.schedule_steps,
            seed: None,
        }
    }
}

impl ToySection {
    pub fn to_toy_config(&self, root_seed: u64) -> ToyConfig {
        ToyConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            seq_len: self.seq_len,
            encoder_layers: self.encoder_layers,
            denoiser_attn_layers: self.denoiser_attn_layers,
            latent_height: self.latent_height,
            latent_width: self.latent_width,
            latent_channels: self.latent_channels,
            schedule_steps: self.schedule_steps,
            seed: self.seed.unwrap_or(root_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub toy: ToySection,
    pub reference: AdapterConfig,
}

impl BackendSection {
    pub fn kind(&self) -> BackendKind {
        self.kind.unwrap_or(BackendKind::Toy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptSection {
    pub placeholder_token: String,
    pub super_category: String,
    pub image_dir: Option<PathBuf>,
    pub animate: bool,
}

impl Default for ConceptSection {
    fn default() -> Self {
        Self {
            placeholder_token: "<s*>".into(),
            super_category: "dog".into(),
            image_dir: None,
            animate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Synthetic latents replace `concept.image_dir` at desk scale.
    pub synthetic: Option<SyntheticDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataset {
    pub n_images: usize,
    pub seed: Option<u64>,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self { n_images: 5, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    pub animate_path: Option<PathBuf>,
    pub inanimate_path: Option<PathBuf>,
    pub training_prompt: String,
}

impl Default for PromptsSection {
    fn default() -> Self {
        Self {
            animate_path: None,
            inanimate_path: None,
            training_prompt: crate::train::DEFAULT_TRAINING_PROMPT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_emb: f64,
    pub lambda_attn: f64,
    pub rescale: bool,
    pub rescale_start: u64,
    pub rescale_end: u64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 6,
            learning_rate: 5e-3,
            lambda_emb: 1.5e-4,
            lambda_attn: 0.05,
            rescale: true,
            rescale_start: 120,
            rescale_end: 180,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_emb: f64,
    pub lambda_attn: f64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 4, learning_rate: 2e-6, lambda_emb: 0.0, lambda_attn: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementSection {
    pub steps: u64,
    pub learning_rate: f64,
    pub lambda_emb: f64,
    pub lambda_attn: f64,
    pub timestep_fraction: f64,
}

impl Default for RefinementSection {
    fn default() -> Self {
        Self {
            steps: 10,
            learning_rate: 5e-3,
            lambda_emb: 1.5e-4,
            lambda_attn: 0.05,
            timestep_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub samples_per_prompt: usize,
    pub eval_animate_path: Option<PathBuf>,
    pub eval_inanimate_path: Option<PathBuf>,
    pub mask_dir: Option<PathBuf>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            samples_per_prompt: 32,
            eval_animate_path: None,
            eval_inanimate_path: None,
            mask_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptionsSection {
    pub emb_context_extent: crate::prompts::ContextExtent,
    pub attn_mean_mode: MeanMode,
    pub attn_ref_latent: AttnRefLatent,
    pub stage2_regularizers: bool,
}

impl Default for OptionsSection {
    fn default() -> Self {
        let d = CoreOptions::default();
        Self {
            emb_context_extent: d.emb_context_extent,
            attn_mean_mode: d.attn_mean_mode,
            attn_ref_latent: d.attn_ref_latent,
            stage2_regularizers: d.stage2_regularizers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub backend: BackendSection,
    pub concept: ConceptSection,
    pub dataset: DatasetSection,
    pub prompts: PromptsSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub refinement: RefinementSection,
    pub metrics: MetricsSection,
    pub options: OptionsSection,
}

/// CLI-level overrides; flags beat file values.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"))
    }

    pub fn concept_spec(&self) -> ConceptSpec {
        ConceptSpec {
            placeholder_token: self.concept.placeholder_token.clone(),
            super_category: self.concept.super_category.clone(),
            image_dir: self.concept.image_dir.clone().unwrap_or_default(),
            animate: self.concept.animate,
        }
    }

    pub fn audience(&self) -> Audience {
        if self.concept.animate {
            Audience::Animate
        } else {
            Audience::Inanimate
        }
    }

    pub fn training_prompt(&self) -> Result<PromptTemplate, ConfigError> {
        PromptTemplate::new(&self.prompts.training_prompt).map_err(|e| ConfigError::Invalid {
            key: "prompts.training_prompt",
            reason: e.to_string(),
        })
    }

    pub fn stage1_config(&self) -> Result<StageConfig, ConfigError> {
        let s = &self.stage1;
        if s.steps == 0 {
            return Err(ConfigError::Invalid { key: "stage1.steps", reason: "must be > 0".into() });
        }
        if s.batch_size == 0 {
            return Err(ConfigError::Invalid {
                key: "stage1.batch_size",
                reason: "must be > 0".into(),
            });
        }
        if s.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid {
                key: "stage1.learning_rate",
                reason: "must be > 0".into(),
            });
        }
        if s.rescale && s.rescale_start >= s.rescale_end {
            return Err(ConfigError::Invalid {
                key: "stage1.rescale_start",
                reason: "window must be non-empty".into(),
            });
        }
        Ok(StageConfig {
            steps: s.steps,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            trainable: Trainable::ConceptVector,
            weights: LossWeights { lambda_emb: s.lambda_emb, lambda_attn: s.lambda_attn },
            rescale_window: s
                .rescale
                .then(|| RescaleWindow::new(s.rescale_start, s.rescale_end)),
            training_prompt: self.training_prompt()?,
            seed: self.seed(),
        })
    }

    pub fn stage2_config(&self) -> Result<StageConfig, ConfigError> {
        let s = &self.stage2;
        if s.steps == 0 {
            return Err(ConfigError::Invalid { key: "stage2.steps", reason: "must be > 0".into() });
        }
        if s.batch_size == 0 {
            return Err(ConfigError::Invalid {
                key: "stage2.batch_size",
                reason: "must be > 0".into(),
            });
        }
        if s.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid {
                key: "stage2.learning_rate",
                reason: "must be > 0".into(),
            });
        }
        Ok(StageConfig {
            steps: s.steps,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            trainable: Trainable::DenoiserAllLayers,
            weights: LossWeights { lambda_emb: s.lambda_emb, lambda_attn: s.lambda_attn },
            rescale_window: None,
            training_prompt: self.training_prompt()?,
            seed: self.seed(),
        })
    }

    pub fn core_options(&self) -> CoreOptions {
        CoreOptions {
            emb_context_extent: self.options.emb_context_extent,
            attn_mean_mode: self.options.attn_mean_mode,
            attn_ref_latent: self.options.attn_ref_latent,
            stage2_regularizers: self.options.stage2_regularizers,
        }
    }

    pub fn refinement_config(&self) -> RefinementConfig {
        let r = &self.refinement;
        RefinementConfig {
            steps: r.steps,
            learning_rate: r.learning_rate,
            weights: LossWeights { lambda_emb: r.lambda_emb, lambda_attn: r.lambda_attn },
            timestep_fraction: r.timestep_fraction,
            latent_seed: self.seed(),
        }
    }

    pub fn toy_config(&self) -> ToyConfig {
        self.backend.toy.to_toy_config(self.seed())
    }

    /// Regularization prompt set for the concept's audience (file if
    /// configured, shipped default otherwise).
    pub fn regularization_set(&self) -> Result<PromptSet, ConfigError> {
        let (path, audience) = match self.audience() {
            Audience::Animate => (&self.prompts.animate_path, Audience::Animate),
            Audience::Inanimate => (&self.prompts.inanimate_path, Audience::Inanimate),
        };
        match path {
            Some(p) => Ok(load_prompt_set(p, audience)?),
            None => Ok(shipped_regularization_set(audience)),
        }
    }

    /// Evaluation prompt list for the concept's audience.
    pub fn eval_set(&self) -> Result<PromptSet, ConfigError> {
        let (path, audience) = match self.audience() {
            Audience::Animate => (&self.metrics.eval_animate_path, Audience::Animate),
            Audience::Inanimate => (&self.metrics.eval_inanimate_path, Audience::Inanimate),
        };
        match path {
            Some(p) => Ok(load_prompt_set(p, audience)?),
            None => Ok(shipped_eval_set(audience)),
        }
    }

    /// Checks field ranges and referenced paths.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.concept.placeholder_token.is_empty() {
            return Err(ConfigError::Invalid {
                key: "concept.placeholder_token",
                reason: "must not be empty".into(),
            });
        }
        if self.concept.super_category.is_empty() {
            return Err(ConfigError::Invalid {
                key: "concept.super_category",
                reason: "must not be empty".into(),
            });
        }
        self.stage1_config()?;
        self.stage2_config()?;
        if self.refinement.steps == 0 {
            return Err(ConfigError::Invalid {
                key: "refinement.steps",
                reason: "must be >= 1".into(),
            });
        }
        if self.metrics.samples_per_prompt == 0 {
            return Err(ConfigError::Invalid {
                key: "metrics.samples_per_prompt",
                reason: "must be >= 1".into(),
            });
        }
        if let Some(n) = &self.dataset.synthetic {
            if n.n_images == 0 {
                return Err(ConfigError::Invalid {
                    key: "dataset.synthetic.n_images",
                    reason: "must be >= 1".into(),
                });
            }
        }
        for (key, path) in [
            ("concept.image_dir", &self.concept.image_dir),
            ("prompts.animate_path", &self.prompts.animate_path),
            ("prompts.inanimate_path", &self.prompts.inanimate_path),
            ("metrics.eval_animate_path", &self.metrics.eval_animate_path),
            ("metrics.eval_inanimate_path", &self.metrics.eval_inanimate_path),
            ("metrics.mask_dir", &self.metrics.mask_dir),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::Invalid {
                        key,
                        reason: format!("path {} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Ensures a training/eval dataset source is configured.
    pub fn require_dataset(&self) -> Result<(), ConfigError> {
        if self.dataset.synthetic.is_none() && self.concept.image_dir.is_none() {
            return Err(ConfigError::Invalid {
                key: "concept.image_dir",
                reason: "set concept.image_dir or dataset.synthetic".into(),
            });
        }
        Ok(())
    }
}

/// Loads the config file (when given), applies overrides, validates.
pub fn parse_and_validate(
    path: Option<&Path>,
    overrides: &CliOverrides,
) -> Result<AppConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = Some(seed);
    }
    if let Some(dir) = &overrides.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_fills_reference_defaults() {
        let cfg: AppConfig = toml::from_str("").unwrap();
        let s1 = cfg.stage1_config().unwrap();
        assert_eq!(s1.steps, 300);
        assert_eq!(s1.batch_size, 6);
        assert_eq!(s1.learning_rate, 5e-3);
        assert_eq!(s1.weights.lambda_emb, 1.5e-4);
        assert_eq!(s1.weights.lambda_attn, 0.05);
        assert_eq!(s1.rescale_window, Some(RescaleWindow::new(120, 180)));
        let s2 = cfg.stage2_config().unwrap();
        assert_eq!(s2.steps, 1000);
        assert_eq!(s2.batch_size, 4);
        assert_eq!(s2.learning_rate, 2e-6);
        assert_eq!(cfg.metrics.samples_per_prompt, 32);
        assert_eq!(cfg.refinement.steps, 10);
    }

    #[test]
    fn cli_seed_beats_file_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n").unwrap();
        let cfg = parse_and_validate(
            Some(&path),
            &CliOverrides { seed: Some(7), output_dir: None },
        )
        .unwrap();
        assert_eq!(cfg.seed(), 7);
        let cfg = parse_and_validate(Some(&path), &CliOverrides::default()).unwrap();
        assert_eq!(cfg.seed(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<AppConfig>("unknown_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown_key"));
        let err = toml::from_str::<AppConfig>("[stage1]\nstep_count = 10\n").unwrap_err();
        assert!(err.to_string().contains("step_count"));
    }

    #[test]
    fn type_mismatch_is_rejected() {
        let err = toml::from_str::<AppConfig>("[stage1]\nsteps = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("steps") || err.to_string().contains("integer"));
    }

    #[test]
    fn missing_image_dir_named_in_error() {
        let cfg: AppConfig = toml::from_str("").unwrap();
        let err = cfg.require_dataset().unwrap_err();
        match err {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "concept.image_dir"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonexistent_path_named_in_error() {
        let cfg: AppConfig =
            toml::from_str("[concept]\nimage_dir = \"/no/such/dir\"\n").unwrap();
        let err = cfg.validate().unwrap_err();
        match err {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "concept.image_dir"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toy_seed_defaults_to_root_seed() {
        let cfg: AppConfig = toml::from_str("seed = 11\n").unwrap();
        assert_eq!(cfg.toy_config().seed, 11);
        let cfg: AppConfig = toml::from_str("seed = 11\n[backend.toy]\nseed = 2\n").unwrap();
        assert_eq!(cfg.toy_config().seed, 2);
    }

    #[test]
    fn shipped_sets_resolve_by_audience() {
        let animate: AppConfig = toml::from_str("[concept]\nanimate = true\n").unwrap();
        assert_eq!(animate.regularization_set().unwrap().audience, Audience::Animate);
        let inanimate: AppConfig = toml::from_str("[concept]\nanimate = false\n").unwrap();
        assert_eq!(inanimate.regularization_set().unwrap().audience, Audience::Inanimate);
        assert_eq!(inanimate.eval_set().unwrap().len(), 20);
    }

    #[test]
    fn zero_stage_steps_rejected() {
        let cfg: AppConfig = toml::from_str("[stage1]\nsteps = 0\n").unwrap();
        let err = cfg.validate().unwrap_err();
        match err {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "stage1.steps"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
