//! Two-stage training schedule.
//!
//! Stage 1 optimizes the concept vector against the full objective: the
//! denoising loss on a fixed training prompt plus the two context
//! regularizers on a freshly sampled prompt pair, with norm rescaling
//! inside a mid-training window. Stage 2 freezes the vector and
//! fine-tunes every denoiser weight on the denoising loss alone.
//!
//! Both regularizer denoiser passes see the same noised latent and
//! timestep as the first diffusion-loss sample of the step, so the only
//! difference between them is the conditioning.

use crate::autodiff::Graph;
use crate::backend::{Backend, BackendError, MeanMode, ParamBinding, TokenId, WeightGroup};
use crate::checkpoint::{CheckpointBundle, CheckpointError, WeightEntry};
use crate::embedding::{
    init_concept_embedding, inject, should_rescale, ConceptEmbedding, EmbeddingError,
    RescaleWindow,
};
use crate::losses::{
    combine_on_tape, context_attention_loss, context_embedding_loss, diffusion_loss, total_loss,
    LossBreakdown, LossError, LossWeights,
};
use crate::prompts::{
    instantiate_pair, sample_regularization_prompt, ConceptSpec, ContextExtent, PromptError,
    PromptPair, PromptSet, PromptTemplate,
};
use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}: diffusion={diffusion} emb={emb} attn={attn}")]
    NonFiniteLoss { step: u64, diffusion: f64, emb: f64, attn: f64 },
    #[error("stage {0} requires trainable={1}")]
    WrongTrainable(u8, &'static str),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which parameter set a stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    ConceptVector,
    DenoiserAllLayers,
}

/// Which latent the reference prompt's attention pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnRefLatent {
    /// Same noised latent and timestep as the step's first diffusion
    /// sample; isolates the conditioning difference.
    Shared,
    /// A dedicated draw from the regularizer stream.
    Independent,
}

/// Cross-cutting regularizer options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreOptions {
    pub emb_context_extent: ContextExtent,
    pub attn_mean_mode: MeanMode,
    pub attn_ref_latent: AttnRefLatent,
    /// Keep the context regularizers on during stage 2 (off by default).
    pub stage2_regularizers: bool,
}

impl Default for CoreOptions {
    fn default() -> Self {
        Self {
            emb_context_extent: ContextExtent::FullSequence,
            attn_mean_mode: MeanMode::PerLayer,
            attn_ref_latent: AttnRefLatent::Shared,
            stage2_regularizers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub trainable: Trainable,
    pub weights: LossWeights,
    pub rescale_window: Option<RescaleWindow>,
    pub training_prompt: PromptTemplate,
    pub seed: u64,
}

pub const DEFAULT_TRAINING_PROMPT: &str = "a photo of {}";

impl StageConfig {
    /// Stage-1 defaults: 300 steps, batch 6, lr 5e-3, weights
    /// (1.5e-4, 0.05), rescale window [120, 180).
    pub fn stage1_defaults(seed: u64) -> Self {
        Self {
            steps: 300,
            batch_size: 6,
            learning_rate: 5e-3,
            trainable: Trainable::ConceptVector,
            weights: LossWeights { lambda_emb: 1.5e-4, lambda_attn: 0.05 },
            rescale_window: Some(RescaleWindow::new(120, 180)),
            training_prompt: PromptTemplate::new(DEFAULT_TRAINING_PROMPT).unwrap(),
            seed,
        }
    }

    /// Stage-2 defaults: 1000 steps, batch 4, lr 2e-6, denoising loss only.
    pub fn stage2_defaults(seed: u64) -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 2e-6,
            trainable: Trainable::DenoiserAllLayers,
            weights: LossWeights { lambda_emb: 0.0, lambda_attn: 0.0 },
            rescale_window: None,
            training_prompt: PromptTemplate::new(DEFAULT_TRAINING_PROMPT).unwrap(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        assert!(self.steps > 0, "steps must be positive");
        assert!(self.batch_size > 0, "batch size must be positive");
        assert!(self.learning_rate > 0.0, "learning rate must be positive");
        self.weights.validate()
    }
}

/// First-order adaptive optimizer with decoupled per-slot moment state.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over a fixed slot order; returns the deltas to add.
    pub fn step(&mut self, grads: &[ArrayD<f64>]) -> Vec<ArrayD<f64>> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|x| ArrayD::zeros(x.raw_dim())).collect();
            self.v = grads.iter().map(|x| ArrayD::zeros(x.raw_dim())).collect();
        }
        assert_eq!(grads.len(), self.m.len(), "optimizer slot count changed");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        grads
            .iter()
            .enumerate()
            .map(|(i, grad)| {
                self.m[i] = &self.m[i] * self.beta1 + &(grad * (1.0 - self.beta1));
                self.v[i] = &self.v[i] * self.beta2 + &(&(grad * grad) * (1.0 - self.beta2));
                let m_hat = &self.m[i] / b1t;
                let v_hat = &self.v[i] / b2t;
                let denom = v_hat.mapv(f64::sqrt) + self.eps;
                -(&m_hat / &denom) * self.lr
            })
            .collect()
    }
}

/// One step's sampled inputs.
pub struct StepBatch {
    pub latents: Vec<Array2<f64>>,
    pub noises: Vec<Array2<f64>>,
    pub timesteps: Vec<usize>,
    /// Dedicated regularizer latent when `attn_ref_latent` is
    /// `Independent`; otherwise the step reuses sample 0.
    pub reg_latent: Option<(Array2<f64>, Array2<f64>, usize)>,
}

/// Per-step record for the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub diffusion: f64,
    pub emb: f64,
    pub attn: f64,
    pub total: f64,
    pub v_norm: f64,
}

/// Stage-1 loop state: the concept vector is the only trainable
/// parameter; encoder and denoiser stay frozen.
pub struct Stage1Loop<'a, B: Backend> {
    backend: &'a B,
    cfg: StageConfig,
    opts: CoreOptions,
    placeholder: TokenId,
    train_pair: PromptPair,
    optimizer: Adam,
    pub concept: ConceptEmbedding,
    pub loss_log: Vec<LossBreakdown>,
    /// `(pre, post)` vectors of the last step's rescaling; `None` when
    /// the last step fell outside the window.
    pub last_rescale: Option<(Array1<f64>, Array1<f64>)>,
}

impl<'a, B: Backend> Stage1Loop<'a, B> {
    pub fn new(
        backend: &'a B,
        cfg: StageConfig,
        opts: CoreOptions,
        concept_spec: &ConceptSpec,
    ) -> Result<Self, TrainError> {
        if cfg.trainable != Trainable::ConceptVector {
            return Err(TrainError::WrongTrainable(1, "concept_vector"));
        }
        cfg.validate()?;
        let (placeholder, _) = concept_spec.resolve(backend.vocab())?;
        let train_pair =
            instantiate_pair(&cfg.training_prompt, concept_spec, backend.vocab(), backend.seq_len())?;
        let concept = init_concept_embedding(concept_spec, backend)?;
        let optimizer = Adam::new(cfg.learning_rate);
        Ok(Self {
            backend,
            cfg,
            opts,
            placeholder,
            train_pair,
            optimizer,
            concept,
            loss_log: Vec::new(),
            last_rescale: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.concept.step
    }

    /// One gradient step on the concept vector. The diffusion loss runs
    /// on the fixed training prompt; the regularizers on `reg_pair`.
    pub fn training_step(
        &mut self,
        batch: &StepBatch,
        reg_pair: &PromptPair,
    ) -> Result<LossBreakdown, TrainError> {
        let step = self.concept.step;
        let w = self.cfg.weights;
        let use_emb = w.lambda_emb != 0.0;
        let use_attn = w.lambda_attn != 0.0;

        let mut g = Graph::new();
        let mut binding = ParamBinding::new();
        let v_leaf = g.leaf(self.concept.vector.clone().into_dyn());

        // denoising objective on the training prompt
        let cond_in = inject(
            &mut g,
            self.backend,
            &self.train_pair.star_ids,
            self.placeholder,
            v_leaf,
            self.train_pair.star_span(),
            self.train_pair.n_prompt_star,
        )?;
        let cond = self.backend.encode_graph(&mut g, cond_in, &mut binding)?;
        let mut diff_acc = None;
        for b in 0..batch.latents.len() {
            let z_t = self.backend.schedule().noised(
                &batch.latents[b],
                &batch.noises[b],
                batch.timesteps[b],
            )?;
            let z_node = g.constant(z_t.into_dyn());
            let eps_node = g.constant(batch.noises[b].clone().into_dyn());
            let pass =
                self.backend
                    .denoise_graph(&mut g, z_node, batch.timesteps[b], cond, &mut binding)?;
            let l = diffusion_loss(&mut g, eps_node, pass.noise_pred)?;
            diff_acc = Some(match diff_acc {
                Some(prev) => g.add(prev, l),
                None => l,
            });
        }
        let diff = g.scale(diff_acc.expect("non-empty batch"), 1.0 / batch.latents.len() as f64);

        // context regularizers on the sampled pair
        let mut emb_node = None;
        let mut attn_node = None;
        if use_emb || use_attn {
            let star_in = inject(
                &mut g,
                self.backend,
                &reg_pair.star_ids,
                self.placeholder,
                v_leaf,
                reg_pair.star_span(),
                reg_pair.n_prompt_star,
            )?;
            let ref_in = inject(
                &mut g,
                self.backend,
                &reg_pair.ref_ids,
                self.placeholder,
                v_leaf,
                0..0,
                reg_pair.n_prompt_ref,
            )?;
            let enc_star = self.backend.encode_graph(&mut g, star_in, &mut binding)?;
            let enc_ref = self.backend.encode_graph(&mut g, ref_in, &mut binding)?;
            if use_emb {
                let pairs = reg_pair.context_pairs(self.opts.emb_context_extent);
                emb_node = Some(context_embedding_loss(&mut g, enc_star, enc_ref, &pairs)?);
            }
            if use_attn {
                let (z0, noise, t) = match (&batch.reg_latent, self.opts.attn_ref_latent) {
                    (Some((z0, n, t)), AttnRefLatent::Independent) => (z0, n, *t),
                    _ => (&batch.latents[0], &batch.noises[0], batch.timesteps[0]),
                };
                let z_t = self.backend.schedule().noised(z0, noise, t)?;
                let z_node = g.constant(z_t.into_dyn());
                let pass_star =
                    self.backend.denoise_graph(&mut g, z_node, t, enc_star, &mut binding)?;
                let pass_ref =
                    self.backend.denoise_graph(&mut g, z_node, t, enc_ref, &mut binding)?;
                let pairs = reg_pair.context_pairs(ContextExtent::RealTokens);
                attn_node = Some(context_attention_loss(
                    &mut g,
                    &pass_star.attn,
                    &pass_ref.attn,
                    &pairs,
                    self.opts.attn_mean_mode,
                )?);
            }
        }

        let total_node = combine_on_tape(&mut g, diff, emb_node, attn_node, &w);
        let diffusion_val = g.scalar(diff);
        let emb_val = emb_node.map(|n| g.scalar(n)).unwrap_or(0.0);
        let attn_val = attn_node.map(|n| g.scalar(n)).unwrap_or(0.0);
        let breakdown = total_loss(diffusion_val, emb_val, attn_val, &w).map_err(|_| {
            TrainError::NonFiniteLoss { step, diffusion: diffusion_val, emb: emb_val, attn: attn_val }
        })?;

        let grads = g.backward(total_node);
        let grad_v = grads.dense(v_leaf, &[self.concept.vector.len()]);
        let delta = self.optimizer.step(std::slice::from_ref(&grad_v));
        let delta1 = delta[0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        self.concept.vector = &self.concept.vector + &delta1;
        self.concept.validate_finite()?;

        self.last_rescale = None;
        if let Some(window) = &self.cfg.rescale_window {
            if should_rescale(step, window) {
                let pre = self.concept.vector.clone();
                self.concept.rescale_to_previous_norm()?;
                self.last_rescale = Some((pre, self.concept.vector.clone()));
            }
        }

        self.concept.step = step + 1;
        self.concept.record_norm(step + 1);
        self.loss_log.push(breakdown);
        Ok(breakdown)
    }
}

/// Draws one step's batch from the stage's named streams.
pub fn draw_batch(
    dataset: &[Array2<f64>],
    batch_size: usize,
    schedule_steps: usize,
    latent_shape: (usize, usize),
    batch_rng: &mut rand_chacha::ChaCha8Rng,
    timestep_rng: &mut rand_chacha::ChaCha8Rng,
    noise_rng: &mut rand_chacha::ChaCha8Rng,
) -> StepBatch {
    let indices: Vec<usize> =
        (0..batch_size).map(|_| batch_rng.gen_range(0..dataset.len())).collect();
    let timesteps: Vec<usize> =
        (0..batch_size).map(|_| timestep_rng.gen_range(0..schedule_steps)).collect();
    let noises: Vec<Array2<f64>> = (0..batch_size)
        .map(|_| crate::rng::normal_array2(noise_rng, latent_shape.0, latent_shape.1, 1.0))
        .collect();
    let latents = indices.iter().map(|&i| dataset[i].clone()).collect();
    StepBatch { latents, noises, timesteps, reg_latent: None }
}

/// Runs stage 1 end to end and returns the checkpoint bundle.
///
/// Exactly one regularization template is drawn per step (from its own
/// stream, so zero-weight runs remain comparable draw-for-draw), and
/// exactly one pair is built from it. Encoder and denoiser weights are
/// never touched.
pub fn run_stage1<B: Backend>(
    backend: &B,
    cfg: &StageConfig,
    opts: &CoreOptions,
    concept_spec: &ConceptSpec,
    dataset: &[Array2<f64>],
    reg_set: &PromptSet,
    toy_config: Option<crate::toy::ToyConfig>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<CheckpointBundle, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut batch_rng = crate::rng::stream(cfg.seed, "stage1.batch");
    let mut timestep_rng = crate::rng::stream(cfg.seed, "stage1.timestep");
    let mut noise_rng = crate::rng::stream(cfg.seed, "stage1.noise");
    let mut template_rng = crate::rng::stream(cfg.seed, "stage1.template");
    let mut reg_rng = crate::rng::stream(cfg.seed, "stage1.reg_latent");

    let mut training = Stage1Loop::new(backend, cfg.clone(), *opts, concept_spec)?;
    let p = backend.latent_positions();
    let c = backend.latent_channels();

    for _ in 0..cfg.steps {
        let mut batch = draw_batch(
            dataset,
            cfg.batch_size,
            backend.schedule().steps(),
            (p, c),
            &mut batch_rng,
            &mut timestep_rng,
            &mut noise_rng,
        );
        if opts.attn_ref_latent == AttnRefLatent::Independent {
            let idx = reg_rng.gen_range(0..dataset.len());
            let t = reg_rng.gen_range(0..backend.schedule().steps());
            let noise = crate::rng::normal_array2(&mut reg_rng, p, c, 1.0);
            batch.reg_latent = Some((dataset[idx].clone(), noise, t));
        }
        let template = sample_regularization_prompt(reg_set, &mut template_rng)?;
        let reg_pair = instantiate_pair(template, concept_spec, backend.vocab(), backend.seq_len())?;
        let breakdown = training.training_step(&batch, &reg_pair)?;
        on_step(&StepRecord {
            step: training.concept.step,
            diffusion: breakdown.diffusion,
            emb: breakdown.emb,
            attn: breakdown.attn,
            total: breakdown.total,
            v_norm: training.concept.norm(),
        });
    }

    Ok(CheckpointBundle {
        version: 1,
        stage: 1,
        concept: concept_spec.clone(),
        step: training.concept.step,
        dim: training.concept.vector.len(),
        vector: training.concept.vector.to_vec(),
        norm_history: training.concept.norm_history.clone(),
        seed: cfg.seed,
        toy_config,
        denoiser: None,
    })
}

/// Runs stage 2: freezes the concept vector and the encoder, fine-tunes
/// every denoiser weight on the denoising loss.
pub fn run_stage2<B: Backend>(
    backend: &mut B,
    cfg: &StageConfig,
    opts: &CoreOptions,
    ckpt: &CheckpointBundle,
    dataset: &[Array2<f64>],
    reg_set: &PromptSet,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<CheckpointBundle, TrainError> {
    if cfg.trainable != Trainable::DenoiserAllLayers {
        return Err(TrainError::WrongTrainable(2, "denoiser_all_layers"));
    }
    cfg.validate()?;
    ckpt.require_stage(1)?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let concept_spec = &ckpt.concept;
    let concept = ckpt.concept_embedding()?;
    let (placeholder, _) = concept_spec.resolve(backend.vocab())?;
    let train_pair =
        instantiate_pair(&cfg.training_prompt, concept_spec, backend.vocab(), backend.seq_len())?;

    backend.set_trainable(WeightGroup::TextEncoder, false);
    backend.set_trainable(WeightGroup::Denoiser, true);

    let use_reg = opts.stage2_regularizers
        && (cfg.weights.lambda_emb != 0.0 || cfg.weights.lambda_attn != 0.0);

    let mut batch_rng = crate::rng::stream(cfg.seed, "stage2.batch");
    let mut timestep_rng = crate::rng::stream(cfg.seed, "stage2.timestep");
    let mut noise_rng = crate::rng::stream(cfg.seed, "stage2.noise");
    let mut template_rng = crate::rng::stream(cfg.seed, "stage2.template");

    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut slot_names: Option<Vec<String>> = None;
    let p = backend.latent_positions();
    let c = backend.latent_channels();

    for step in 0..cfg.steps {
        let batch = draw_batch(
            dataset,
            cfg.batch_size,
            backend.schedule().steps(),
            (p, c),
            &mut batch_rng,
            &mut timestep_rng,
            &mut noise_rng,
        );

        let mut g = Graph::new();
        let mut binding = ParamBinding::new();
        let v_const = g.constant(concept.vector.clone().into_dyn());
        let cond_in = inject(
            &mut g,
            &*backend,
            &train_pair.star_ids,
            placeholder,
            v_const,
            train_pair.star_span(),
            train_pair.n_prompt_star,
        )?;
        let cond = backend.encode_graph(&mut g, cond_in, &mut binding)?;

        let mut diff_acc = None;
        for b in 0..batch.latents.len() {
            let z_t = backend.schedule().noised(
                &batch.latents[b],
                &batch.noises[b],
                batch.timesteps[b],
            )?;
            let z_node = g.constant(z_t.into_dyn());
            let eps_node = g.constant(batch.noises[b].clone().into_dyn());
            let pass =
                backend.denoise_graph(&mut g, z_node, batch.timesteps[b], cond, &mut binding)?;
            let l = diffusion_loss(&mut g, eps_node, pass.noise_pred)?;
            diff_acc = Some(match diff_acc {
                Some(prev) => g.add(prev, l),
                None => l,
            });
        }
        let diff = g.scale(diff_acc.expect("non-empty batch"), 1.0 / batch.latents.len() as f64);

        let mut emb_node = None;
        let mut attn_node = None;
        if use_reg {
            let template = sample_regularization_prompt(reg_set, &mut template_rng)?;
            let reg_pair =
                instantiate_pair(template, concept_spec, backend.vocab(), backend.seq_len())?;
            let star_in = inject(
                &mut g,
                &*backend,
                &reg_pair.star_ids,
                placeholder,
                v_const,
                reg_pair.star_span(),
                reg_pair.n_prompt_star,
            )?;
            let ref_in = inject(
                &mut g,
                &*backend,
                &reg_pair.ref_ids,
                placeholder,
                v_const,
                0..0,
                reg_pair.n_prompt_ref,
            )?;
            let enc_star = backend.encode_graph(&mut g, star_in, &mut binding)?;
            let enc_ref = backend.encode_graph(&mut g, ref_in, &mut binding)?;
            if cfg.weights.lambda_emb != 0.0 {
                let pairs = reg_pair.context_pairs(opts.emb_context_extent);
                emb_node = Some(context_embedding_loss(&mut g, enc_star, enc_ref, &pairs)?);
            }
            if cfg.weights.lambda_attn != 0.0 {
                let z_t = backend.schedule().noised(
                    &batch.latents[0],
                    &batch.noises[0],
                    batch.timesteps[0],
                )?;
                let z_node = g.constant(z_t.into_dyn());
                let pass_star =
                    backend.denoise_graph(&mut g, z_node, batch.timesteps[0], enc_star, &mut binding)?;
                let pass_ref =
                    backend.denoise_graph(&mut g, z_node, batch.timesteps[0], enc_ref, &mut binding)?;
                let pairs = reg_pair.context_pairs(ContextExtent::RealTokens);
                attn_node = Some(context_attention_loss(
                    &mut g,
                    &pass_star.attn,
                    &pass_ref.attn,
                    &pairs,
                    opts.attn_mean_mode,
                )?);
            }
        }

        let total_node = combine_on_tape(&mut g, diff, emb_node, attn_node, &cfg.weights);
        let diffusion_val = g.scalar(diff);
        let emb_val = emb_node.map(|n| g.scalar(n)).unwrap_or(0.0);
        let attn_val = attn_node.map(|n| g.scalar(n)).unwrap_or(0.0);
        let breakdown =
            total_loss(diffusion_val, emb_val, attn_val, &cfg.weights).map_err(|_| {
                TrainError::NonFiniteLoss {
                    step,
                    diffusion: diffusion_val,
                    emb: emb_val,
                    attn: attn_val,
                }
            })?;

        let grads = g.backward(total_node);
        let trainable = binding.trainable();
        match &slot_names {
            Some(names) => {
                let now: Vec<&String> = trainable.iter().map(|(n, _)| n).collect();
                debug_assert!(names.iter().eq(now.into_iter()), "slot order must be stable");
            }
            None => slot_names = Some(trainable.iter().map(|(n, _)| n.clone()).collect()),
        }
        let grad_arrays: Vec<ArrayD<f64>> = trainable
            .iter()
            .map(|(_, id)| {
                let shape: Vec<usize> = g.value(*id).shape().to_vec();
                grads.dense(*id, &shape)
            })
            .collect();
        let deltas = optimizer.step(&grad_arrays);
        for ((name, _), delta) in trainable.iter().zip(deltas.iter()) {
            backend.apply_param_update(name, delta)?;
        }

        on_step(&StepRecord {
            step: step + 1,
            diffusion: breakdown.diffusion,
            emb: breakdown.emb,
            attn: breakdown.attn,
            total: breakdown.total,
            v_norm: concept.norm(),
        });
    }

    backend.set_trainable(WeightGroup::Denoiser, false);

    let denoiser = backend
        .export_weights(WeightGroup::Denoiser)
        .into_iter()
        .map(|(name, values, shape)| WeightEntry { name, shape, values })
        .collect();

    Ok(CheckpointBundle {
        version: 1,
        stage: 2,
        concept: concept_spec.clone(),
        step: ckpt.step,
        dim: ckpt.dim,
        vector: ckpt.vector.clone(),
        norm_history: ckpt.norm_history.clone(),
        seed: cfg.seed,
        toy_config: ckpt.toy_config.clone(),
        denoiser: Some(denoiser),
    })
}

/// Rebuilds a backend matching a bundle: seeded toy weights plus the
/// bundle's fine-tuned denoiser weights when present.
pub fn restore_toy_backend(ckpt: &CheckpointBundle) -> Result<crate::toy::ToyBackend, TrainError> {
    let cfg = ckpt.toy_config.clone().unwrap_or_default();
    let mut backend = crate::toy::ToyBackend::seeded(&cfg);
    if let Some(weights) = &ckpt.denoiser {
        let triples: Vec<(String, Vec<f64>, Vec<usize>)> = weights
            .iter()
            .map(|w| (w.name.clone(), w.values.clone(), w.shape.clone()))
            .collect();
        backend.import_weights(WeightGroup::Denoiser, &triples)?;
    }
    Ok(backend)
}

/// Output-side conditioning for a padded id sequence with the concept
/// vector injected at `span`; plain-value plane.
pub fn conditioning_for_ids<B: Backend>(
    backend: &B,
    ids: &[TokenId],
    placeholder: TokenId,
    vector: &Array1<f64>,
    span: std::ops::Range<usize>,
    real_len: usize,
) -> Result<crate::backend::EmbeddingSequence, TrainError> {
    let mut g = Graph::new();
    let mut binding = ParamBinding::new();
    let v = g.constant(vector.clone().into_dyn());
    let seq = inject(&mut g, backend, ids, placeholder, v, span, real_len)?;
    let out = backend.encode_graph(&mut g, seq, &mut binding)?;
    Ok(crate::backend::EmbeddingSequence::new(
        g.value(out.node).clone().into_dimensionality::<ndarray::Ix2>().unwrap(),
        crate::backend::Side::Output,
        real_len,
    ))
}
