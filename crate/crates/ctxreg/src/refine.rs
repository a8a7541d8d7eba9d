//! Per-prompt test-time refinement.
//!
//! Starting from a finished checkpoint, a copy of the concept vector is
//! optimized for one specific prompt using only the two context
//! regularizers — no denoising loss. The attention term is evaluated at
//! a fixed seeded latent and a fixed mid-schedule timestep. The iterate
//! with the lowest objective wins, so the returned vector never scores
//! worse than the input; the checkpoint on disk is never touched.

use crate::autodiff::Graph;
use crate::backend::{Backend, ParamBinding};
use crate::checkpoint::CheckpointBundle;
use crate::embedding::inject;
use crate::losses::{context_attention_loss, context_embedding_loss, LossWeights};
use crate::prompts::{instantiate_pair, ConceptSpec, ContextExtent, PromptTemplate};
use crate::train::{Adam, CoreOptions, TrainError};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Timestep for the attention term, as a fraction of the schedule.
    pub timestep_fraction: f64,
    pub latent_seed: u64,
}

impl RefinementConfig {
    /// Defaults: 10 steps at the stage-1 learning rate and weights.
    pub fn defaults(seed: u64) -> Self {
        Self {
            steps: 10,
            learning_rate: 5e-3,
            weights: LossWeights { lambda_emb: 1.5e-4, lambda_attn: 0.05 },
            timestep_fraction: 0.5,
            latent_seed: seed,
        }
    }
}

/// Refinement result: the winning iterate and the objective trace
/// (entry 0 is the starting objective).
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub vector: Array1<f64>,
    pub objective_trace: Vec<f64>,
    pub best_step: u64,
}

impl RefineOutcome {
    pub fn initial_objective(&self) -> f64 {
        self.objective_trace[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap()
    }

    pub fn best_objective(&self) -> f64 {
        self.objective_trace[self.best_step as usize]
    }
}

/// Refines a copy of the checkpoint's concept vector for `template`.
pub fn refine<B: Backend>(
    backend: &B,
    ckpt: &CheckpointBundle,
    template: &PromptTemplate,
    concept_spec: &ConceptSpec,
    cfg: &RefinementConfig,
    opts: &CoreOptions,
) -> Result<RefineOutcome, TrainError> {
    assert!(cfg.steps >= 1, "refinement needs at least one step");
    cfg.weights.validate()?;
    let pair = instantiate_pair(template, concept_spec, backend.vocab(), backend.seq_len())?;
    let (placeholder, _) = concept_spec.resolve(backend.vocab())?;

    // fixed evaluation point for the attention term
    let p = backend.latent_positions();
    let c = backend.latent_channels();
    let mut rng = crate::rng::stream(cfg.latent_seed, "refine.latent");
    let z_t: Array2<f64> = crate::rng::normal_array2(&mut rng, p, c, 1.0);
    let t = ((backend.schedule().steps() - 1) as f64 * cfg.timestep_fraction).round() as usize;

    let emb_pairs = pair.context_pairs(opts.emb_context_extent);
    let attn_pairs = pair.context_pairs(ContextExtent::RealTokens);
    let use_emb = cfg.weights.lambda_emb != 0.0;
    let use_attn = cfg.weights.lambda_attn != 0.0;

    // objective and its gradient at v
    let eval = |v: &Array1<f64>, want_grad: bool| -> Result<(f64, Option<Array1<f64>>), TrainError> {
        let mut g = Graph::new();
        let mut binding = ParamBinding::new();
        let v_leaf = g.leaf(v.clone().into_dyn());
        let star_in = inject(
            &mut g,
            backend,
            &pair.star_ids,
            placeholder,
            v_leaf,
            pair.star_span(),
            pair.n_prompt_star,
        )?;
        let ref_in = inject(
            &mut g,
            backend,
            &pair.ref_ids,
            placeholder,
            v_leaf,
            0..0,
            pair.n_prompt_ref,
        )?;
        let enc_star = backend.encode_graph(&mut g, star_in, &mut binding)?;
        let enc_ref = backend.encode_graph(&mut g, ref_in, &mut binding)?;

        let mut total = g.scalar_const(0.0);
        if use_emb {
            let emb = context_embedding_loss(&mut g, enc_star, enc_ref, &emb_pairs)?;
            let scaled = g.scale(emb, cfg.weights.lambda_emb);
            total = g.add(total, scaled);
        }
        if use_attn {
            let z_node = g.constant(z_t.clone().into_dyn());
            let pass_star = backend.denoise_graph(&mut g, z_node, t, enc_star, &mut binding)?;
            let pass_ref = backend.denoise_graph(&mut g, z_node, t, enc_ref, &mut binding)?;
            let attn = context_attention_loss(
                &mut g,
                &pass_star.attn,
                &pass_ref.attn,
                &attn_pairs,
                opts.attn_mean_mode,
            )?;
            let scaled = g.scale(attn, cfg.weights.lambda_attn);
            total = g.add(total, scaled);
        }
        let value = g.scalar(total);
        let grad = if want_grad && (use_emb || use_attn) {
            let grads = g.backward(total);
            Some(
                grads
                    .dense(v_leaf, &[v.len()])
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap(),
            )
        } else if want_grad {
            Some(Array1::zeros(v.len()))
        } else {
            None
        };
        Ok((value, grad))
    };

    let start = ckpt.concept_embedding()?.vector;
    let mut v = start.clone();
    let mut optimizer = Adam::new(cfg.learning_rate);
    let (initial, _) = eval(&v, false)?;
    let mut trace = vec![initial];
    let mut best_v = start;
    let mut best_obj = initial;
    let mut best_step = 0u64;

    for step in 0..cfg.steps {
        let (_, grad) = eval(&v, true)?;
        let grad = grad.unwrap();
        let delta = optimizer.step(std::slice::from_ref(&grad.into_dyn()));
        let delta1 = delta[0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        v = &v + &delta1;
        let (obj, _) = eval(&v, false)?;
        trace.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best_v = v.clone();
            best_step = step + 1;
        }
    }

    Ok(RefineOutcome { vector: best_v, objective_trace: trace, best_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{shipped_regularization_set, Audience};
    use crate::toy::{make_toy_dataset, ToyBackend, ToyConfig};
    use crate::train::{run_stage1, run_stage2, StageConfig};

    fn concept() -> ConceptSpec {
        ConceptSpec {
            placeholder_token: "<s*>".into(),
            super_category: "dog".into(),
            image_dir: ".".into(),
            animate: true,
        }
    }

    fn trained_bundle() -> (ToyBackend, CheckpointBundle) {
        let toy_cfg = ToyConfig::default();
        let mut backend = ToyBackend::seeded(&toy_cfg);
        let dataset = make_toy_dataset(&toy_cfg, 2, 1);
        let set = shipped_regularization_set(Audience::Animate);
        let cfg1 = StageConfig { steps: 4, batch_size: 2, ..StageConfig::stage1_defaults(0) };
        let s1 = run_stage1(
            &backend,
            &cfg1,
            &CoreOptions::default(),
            &concept(),
            &dataset,
            &set,
            Some(toy_cfg),
            |_| {},
        )
        .unwrap();
        let cfg2 = StageConfig { steps: 2, batch_size: 1, ..StageConfig::stage2_defaults(0) };
        let s2 = run_stage2(
            &mut backend,
            &cfg2,
            &CoreOptions::default(),
            &s1,
            &dataset,
            &set,
            |_| {},
        )
        .unwrap();
        (backend, s2)
    }

    #[test]
    fn zero_lr_single_step_returns_input() {
        let (backend, ckpt) = trained_bundle();
        let cfg = RefinementConfig {
            steps: 1,
            learning_rate: 0.0,
            ..RefinementConfig::defaults(3)
        };
        let t = PromptTemplate::new("a {} in the snow").unwrap();
        let out = refine(&backend, &ckpt, &t, &concept(), &cfg, &CoreOptions::default()).unwrap();
        for (a, b) in out.vector.iter().zip(ckpt.vector.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_weights_return_input_exactly() {
        let (backend, ckpt) = trained_bundle();
        let cfg = RefinementConfig {
            weights: LossWeights { lambda_emb: 0.0, lambda_attn: 0.0 },
            ..RefinementConfig::defaults(3)
        };
        let t = PromptTemplate::new("a {} in the snow").unwrap();
        let out = refine(&backend, &ckpt, &t, &concept(), &cfg, &CoreOptions::default()).unwrap();
        for (a, b) in out.vector.iter().zip(ckpt.vector.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(out.best_step, 0);
    }

    #[test]
    fn objective_never_increases_for_winner() {
        let (backend, ckpt) = trained_bundle();
        let cfg = RefinementConfig::defaults(5);
        let t = PromptTemplate::new("a {} wearing a sombrero").unwrap();
        let out = refine(&backend, &ckpt, &t, &concept(), &cfg, &CoreOptions::default()).unwrap();
        assert_eq!(out.objective_trace.len(), 11);
        assert!(out.best_objective() <= out.initial_objective());
    }

    #[test]
    fn refinement_decreases_objective_on_toy_stack() {
        let (backend, ckpt) = trained_bundle();
        let cfg = RefinementConfig::defaults(5);
        let t = PromptTemplate::new("a {} in the jungle").unwrap();
        let out = refine(&backend, &ckpt, &t, &concept(), &cfg, &CoreOptions::default()).unwrap();
        assert!(
            out.best_objective() < out.initial_objective(),
            "trace {:?}",
            out.objective_trace
        );
        // endpoints: the step-10 objective sits strictly below step 0
        assert!(out.final_objective() < out.initial_objective());
    }

    #[test]
    fn refine_is_deterministic() {
        let (backend, ckpt) = trained_bundle();
        let cfg = RefinementConfig::defaults(9);
        let t = PromptTemplate::new("a {} on the beach").unwrap();
        let a = refine(&backend, &ckpt, &t, &concept(), &cfg, &CoreOptions::default()).unwrap();
        let b = refine(&backend, &ckpt, &t, &concept(), &cfg, &CoreOptions::default()).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.objective_trace, b.objective_trace);
    }
}
