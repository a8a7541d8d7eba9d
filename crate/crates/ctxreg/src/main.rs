use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use ctxreg::backend::Backend;
use ctxreg::checkpoint::{CheckpointBundle, SidecarEmbedding};
use ctxreg::config::{parse_and_validate, AppConfig, BackendKind, CliOverrides};
use ctxreg::eval::{
    ChannelMeanFeaturizer, EvalError, EvalImage, FileMaskProvider, FlattenFeaturizer,
    FullForegroundMasks, HashScorer, IdentityFeaturizers, MaskProvider, MetricConfig,
    SampleGenerator,
};
use ctxreg::prompts::{load_prompt_set, Audience, PromptTemplate};
use ctxreg::toy::{load_latent_dir, make_toy_dataset, LatentDump, ToyBackend};
use ctxreg::train::{restore_toy_backend, run_stage1, run_stage2, StepRecord};
use ndarray::{Array2, Array3};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const CONFIG_KEYS_HELP: &str = "\
Config file keys (TOML) and their defaults:
  seed                        root seed for every stream (0)
  output_dir                  run artifacts directory (\"runs/default\")
  [backend] kind              \"toy\" | \"reference\" (\"toy\")
  [backend.toy] vocab_size    toy vocabulary size (64)
                embed_dim     embedding width (16)
                seq_len       fixed encoder length (12)
                encoder_layers        encoder depth (2)
                denoiser_attn_layers  cross-attention layers (4)
                latent_height/width/channels  latent grid (8/8/4)
                schedule_steps        noising schedule length (100)
                seed                  weight-init seed (root seed)
  [backend.reference] model_id/device/precision/layer_selector/weights_dir
                (stable-diffusion-2-1 / cuda:0 / fp16 / attn2 / unset)
  [concept]  placeholder_token  reserved concept token (\"<s*>\")
             super_category     existing word initializing it (\"dog\")
             image_dir          directory of latent dumps (unset)
             animate            picks the prompt sets (true)
  [dataset.synthetic] n_images  synthetic latents instead of image_dir (5)
                      seed      dataset seed (root seed)
  [prompts]  animate_path/inanimate_path  regularization set files
             (built-in 100-template sets)
             training_prompt    stage-1 diffusion prompt (\"a photo of {}\")
  [stage1]   steps 300, batch_size 6, learning_rate 5e-3,
             lambda_emb 1.5e-4, lambda_attn 0.05,
             rescale true, rescale_start 120, rescale_end 180
  [stage2]   steps 1000, batch_size 4, learning_rate 2e-6,
             lambda_emb 0, lambda_attn 0
  [refinement] steps 10, learning_rate 5e-3,
             lambda_emb 1.5e-4, lambda_attn 0.05, timestep_fraction 0.5
  [metrics]  samples_per_prompt 32, eval_animate_path/eval_inanimate_path
             (built-in 20-prompt lists), mask_dir (full-foreground masks)
  [options]  emb_context_extent \"full_sequence\" | \"real_tokens\" (full_sequence)
             attn_mean_mode     \"per_layer\" | \"flat\" (per_layer)
             attn_ref_latent    \"shared\" | \"independent\" (shared)
             stage2_regularizers  keep regularizers in stage 2 (false)";

#[derive(Parser)]
#[command(
    name = "ctxreg",
    version,
    about = "Concept personalization via context-token regularization",
    after_long_help = CONFIG_KEYS_HELP
)]
struct Cli {
    /// Config file (TOML); built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config file.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training schedule (stage 1: concept vector; stage 2: denoiser).
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Refine a per-prompt copy of the concept vector (no denoising loss).
    Refine {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Prompt template; "{}" marks the concept slot.
        #[arg(long)]
        prompt: String,
        /// Optimization steps (default from config: 10).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample latents for a prompt (uses a refined sidecar when present).
    Generate {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Samples to draw (default 32).
        #[arg(long, default_value_t = 32)]
        n_samples: usize,
    },
    /// Run the metric protocol and write a report.
    Eval {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Report path (default <output_dir>/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embedding and attention diagnostics.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Prompt-set file utilities.
    Prompts {
        #[command(subcommand)]
        what: PromptsCommand,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Pairwise cosine matrix between two prompts' output embeddings.
    Sim {
        #[arg(long)]
        prompt_a: String,
        #[arg(long)]
        prompt_b: String,
        /// Checkpoint supplying the concept vector for "<s*>" prompts.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Image path (default <output_dir>/analysis/sim.png).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token attention heat maps from one recorded denoiser pass.
    Attn {
        #[arg(long)]
        prompt: String,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Image path (default <output_dir>/analysis/attn.png).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PromptsCommand {
    /// Parse a prompt-set file and report problems.
    Validate {
        #[arg(long, value_name = "FILE")]
        file: PathBuf,
        #[arg(long, value_enum)]
        audience: AudienceArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AudienceArg {
    Animate,
    Inanimate,
}

/// Failure classes mapped onto exit codes: validation errors exit 1,
/// runtime failures exit 2.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if e.kind() == ErrorKind::DisplayHelp || e.kind() == ErrorKind::DisplayVersion =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = CliOverrides { seed: cli.seed, output_dir: cli.output_dir.clone() };
    let cfg = parse_and_validate(cli.config.as_deref(), &overrides).map_err(validation)?;

    match cli.command {
        Command::Train { stage } => cmd_train(&cfg, stage),
        Command::Refine { checkpoint, prompt, steps } => {
            cmd_refine(&cfg, &checkpoint, &prompt, steps)
        }
        Command::Generate { checkpoint, prompt, n_samples } => {
            cmd_generate(&cfg, &checkpoint, &prompt, n_samples)
        }
        Command::Eval { checkpoint, out } => cmd_eval(&cfg, &checkpoint, out.as_deref()),
        Command::Analyze { what } => cmd_analyze(&cfg, what),
        Command::Prompts { what } => cmd_prompts(what),
    }
}

fn require_toy_backend(cfg: &AppConfig) -> Result<ToyBackend, Failure> {
    match cfg.backend.kind() {
        BackendKind::Toy => Ok(ToyBackend::seeded(&cfg.toy_config())),
        BackendKind::Reference => match ctxreg::adapter::bind(&cfg.backend.reference) {
            Ok(bound) => Err(runtime(format!(
                "reference backend binding validated ({} cross-attention layers at {}), but this build ships no full-scale runtime; run the toy backend or follow the full-scale recipe in the README",
                bound.layer_count(),
                bound.weights_root.display()
            ))),
            Err(e) => Err(runtime(e)),
        },
    }
}

fn load_dataset(cfg: &AppConfig, backend: &ToyBackend) -> Result<Vec<Array2<f64>>, Failure> {
    cfg.require_dataset().map_err(validation)?;
    if let Some(synth) = &cfg.dataset.synthetic {
        let seed = synth.seed.unwrap_or(cfg.seed());
        return Ok(make_toy_dataset(backend.config(), synth.n_images, seed));
    }
    let dir = cfg.concept.image_dir.as_ref().expect("validated");
    load_latent_dir(dir, backend.latent_grid(), backend.latent_channels())
        .map_err(|e| runtime(format!("loading {}: {e}", dir.display())))
}

fn open_log(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    let file =
        std::fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(file))
}

fn log_step(log: &mut impl Write, record: &StepRecord) {
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(log, "{line}").expect("log write");
}

fn cmd_train(cfg: &AppConfig, stage: StageArg) -> Result<(), Failure> {
    let mut backend = require_toy_backend(cfg)?;
    let dataset = load_dataset(cfg, &backend)?;
    let reg_set = cfg.regularization_set().map_err(validation)?;
    let concept = cfg.concept_spec();
    let opts = cfg.core_options();
    let out_dir = cfg.output_dir();

    let stage1 = |backend: &ToyBackend| -> Result<CheckpointBundle, Failure> {
        let s1_cfg = cfg.stage1_config().map_err(validation)?;
        let mut log = open_log(&out_dir.join("train_stage1.jsonl"))?;
        let ckpt = run_stage1(
            backend,
            &s1_cfg,
            &opts,
            &concept,
            &dataset,
            &reg_set,
            Some(backend.config().clone()),
            |r| log_step(&mut log, r),
        )
        .map_err(runtime)?;
        ckpt.save(&out_dir).map_err(runtime)?;
        println!("stage 1 done: {} steps, checkpoint at {}", ckpt.step, out_dir.display());
        Ok(ckpt)
    };

    let stage2 = |backend: &mut ToyBackend, s1: &CheckpointBundle| -> Result<(), Failure> {
        let s2_cfg = cfg.stage2_config().map_err(validation)?;
        let mut log = open_log(&out_dir.join("train_stage2.jsonl"))?;
        let ckpt = run_stage2(backend, &s2_cfg, &opts, s1, &dataset, &reg_set, |r| {
            log_step(&mut log, r)
        })
        .map_err(runtime)?;
        ckpt.save(&out_dir).map_err(runtime)?;
        println!("stage 2 done: checkpoint at {}", out_dir.display());
        Ok(())
    };

    match stage {
        StageArg::One => {
            stage1(&backend)?;
        }
        StageArg::Two => {
            let s1 = CheckpointBundle::load(&out_dir).map_err(runtime)?;
            s1.require_stage(1).map_err(runtime)?;
            stage2(&mut backend, &s1)?;
        }
        StageArg::Both => {
            let s1 = stage1(&backend)?;
            stage2(&mut backend, &s1)?;
        }
    }
    Ok(())
}

fn cmd_refine(
    cfg: &AppConfig,
    ckpt_dir: &Path,
    prompt: &str,
    steps: Option<u64>,
) -> Result<(), Failure> {
    let ckpt = CheckpointBundle::load(ckpt_dir).map_err(runtime)?;
    ckpt.require_stage(2).map_err(runtime)?;
    let backend = restore_toy_backend(&ckpt).map_err(runtime)?;
    let template = PromptTemplate::new(prompt).map_err(validation)?;
    let mut rcfg = cfg.refinement_config();
    if let Some(s) = steps {
        if s == 0 {
            return Err(validation("refinement needs at least one step"));
        }
        rcfg.steps = s;
    }
    let outcome = ctxreg::refine::refine(
        &backend,
        &ckpt,
        &template,
        &ckpt.concept,
        &rcfg,
        &cfg.core_options(),
    )
    .map_err(runtime)?;
    let sidecar = SidecarEmbedding::new(prompt, &outcome.vector);
    let path = sidecar.save(ckpt_dir).map_err(runtime)?;
    println!(
        "refined over {} steps: objective {:.6e} -> {:.6e} (best at step {}), sidecar at {}",
        rcfg.steps,
        outcome.initial_objective(),
        outcome.best_objective(),
        outcome.best_step,
        path.display()
    );
    Ok(())
}

/// Conditioning for a prompt that may or may not contain the "{}" slot.
fn conditioning_for_prompt(
    backend: &ToyBackend,
    ckpt: &CheckpointBundle,
    prompt: &str,
    vector: &ndarray::Array1<f64>,
) -> Result<ctxreg::backend::EmbeddingSequence, Failure> {
    let (placeholder, _) = ckpt.concept.resolve(backend.vocab()).map_err(runtime)?;
    if prompt.contains("{}") {
        let template = PromptTemplate::new(prompt).map_err(validation)?;
        let pair = ctxreg::prompts::instantiate_pair(
            &template,
            &ckpt.concept,
            backend.vocab(),
            backend.seq_len(),
        )
        .map_err(runtime)?;
        ctxreg::train::conditioning_for_ids(
            backend,
            &pair.star_ids,
            placeholder,
            vector,
            pair.star_span(),
            pair.n_prompt_star,
        )
        .map_err(runtime)
    } else {
        let vocab = backend.vocab();
        let word_ids = ctxreg::prompts::tokenize_words(vocab, prompt).map_err(runtime)?;
        let real = word_ids.len() + 2;
        if real > backend.seq_len() {
            return Err(validation(format!(
                "prompt needs {real} positions but the encoder length is {}",
                backend.seq_len()
            )));
        }
        let mut ids = vec![vocab.bos_id()];
        ids.extend(word_ids);
        ids.push(vocab.eos_id());
        while ids.len() < backend.seq_len() {
            ids.push(vocab.pad_id());
        }
        let span = ids
            .iter()
            .position(|&id| id == placeholder)
            .map(|k| k..k + 1)
            .unwrap_or(0..0);
        ctxreg::train::conditioning_for_ids(backend, &ids, placeholder, vector, span, real)
            .map_err(runtime)
    }
}

fn cmd_generate(
    cfg: &AppConfig,
    ckpt_dir: &Path,
    prompt: &str,
    n_samples: usize,
) -> Result<(), Failure> {
    let ckpt = CheckpointBundle::load(ckpt_dir).map_err(runtime)?;
    ckpt.require_stage(2).map_err(runtime)?;
    let backend = restore_toy_backend(&ckpt).map_err(runtime)?;

    let sidecar = SidecarEmbedding::load_for(ckpt_dir, prompt).map_err(runtime)?;
    let vector = match &sidecar {
        Some(s) => ndarray::Array1::from_vec(s.vector.clone()),
        None => ndarray::Array1::from_vec(ckpt.vector.clone()),
    };
    if sidecar.is_some() {
        println!("using refined per-prompt embedding");
    }
    let cond = conditioning_for_prompt(&backend, &ckpt, prompt, &vector)?;

    let out_dir = cfg.output_dir().join("generate").join(ctxreg::checkpoint::prompt_hash(prompt));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;
    println!("note: the toy backend emits latents, not images; writing latent dumps");
    let seed = cfg.seed();
    for i in 0..n_samples {
        let z = backend
            .sample_latent(&cond, seed, &format!("sample.{i}"))
            .map_err(runtime)?;
        let dump = LatentDump::from_latent(&z, backend.latent_grid());
        let path = out_dir.join(format!("sample_{i:03}.json"));
        dump.save(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    println!("wrote {n_samples} latent dumps to {}", out_dir.display());
    Ok(())
}

struct ToyGenerator<'a> {
    backend: &'a ToyBackend,
    ckpt: &'a CheckpointBundle,
    vector: ndarray::Array1<f64>,
}

impl SampleGenerator for ToyGenerator<'_> {
    fn generate(
        &self,
        template: &PromptTemplate,
        n: usize,
        seed: u64,
    ) -> Result<Vec<EvalImage>, EvalError> {
        let fail = |message: String| EvalError::Generation {
            prompt: template.text.clone(),
            message,
        };
        let pair = ctxreg::prompts::instantiate_pair(
            template,
            &self.ckpt.concept,
            self.backend.vocab(),
            self.backend.seq_len(),
        )
        .map_err(|e| fail(e.to_string()))?;
        let (placeholder, _) = self
            .ckpt
            .concept
            .resolve(self.backend.vocab())
            .map_err(|e| fail(e.to_string()))?;
        let cond = ctxreg::train::conditioning_for_ids(
            self.backend,
            &pair.star_ids,
            placeholder,
            &self.vector,
            pair.star_span(),
            pair.n_prompt_star,
        )
        .map_err(|e| fail(e.to_string()))?;
        let (h, w) = self.backend.latent_grid();
        let c = self.backend.latent_channels();
        let hash = ctxreg::checkpoint::prompt_hash(&template.text);
        (0..n)
            .map(|i| {
                let z = self
                    .backend
                    .sample_latent(&cond, seed, &format!("eval.{hash}.{i}"))
                    .map_err(|e| fail(e.to_string()))?;
                Ok(EvalImage {
                    id: format!("gen-{hash}-{i:03}"),
                    pixels: latent_to_image(&z, h, w, c),
                })
            })
            .collect()
    }
}

fn latent_to_image(z: &Array2<f64>, h: usize, w: usize, c: usize) -> Array3<f64> {
    let mut img = Array3::zeros((h, w, c));
    for p in 0..h * w {
        for ch in 0..c {
            img[(p / w, p % w, ch)] = z[(p, ch)];
        }
    }
    img
}

fn cmd_eval(cfg: &AppConfig, ckpt_dir: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let ckpt = CheckpointBundle::load(ckpt_dir).map_err(runtime)?;
    ckpt.require_stage(2).map_err(runtime)?;
    let backend = restore_toy_backend(&ckpt).map_err(runtime)?;
    let dataset = load_dataset(cfg, &backend)?;
    let (h, w) = backend.latent_grid();
    let c = backend.latent_channels();
    let references: Vec<EvalImage> = dataset
        .iter()
        .enumerate()
        .map(|(i, z)| EvalImage { id: format!("ref-{i:03}"), pixels: latent_to_image(z, h, w, c) })
        .collect();

    let eval_set = cfg.eval_set().map_err(validation)?;
    let metric_cfg = MetricConfig {
        samples_per_prompt: cfg.metrics.samples_per_prompt,
        ..MetricConfig::defaults(eval_set, cfg.seed())
    };
    let generator = ToyGenerator {
        backend: &backend,
        ckpt: &ckpt,
        vector: ndarray::Array1::from_vec(ckpt.vector.clone()),
    };
    let scorer = HashScorer { feature_len: 64 };
    let clip_image = ChannelMeanFeaturizer;
    let dino = FlattenFeaturizer;
    let featurizers = IdentityFeaturizers { clip_image: &clip_image, dino: &dino };
    let mask_provider: Box<dyn MaskProvider> = match &cfg.metrics.mask_dir {
        Some(dir) => Box::new(FileMaskProvider { dir: dir.clone() }),
        None => Box::new(FullForegroundMasks),
    };

    let report = ctxreg::eval::evaluate_concept(
        &generator,
        &references,
        &ckpt.concept.super_category,
        &metric_cfg,
        &scorer,
        &featurizers,
        mask_provider.as_ref(),
    )
    .map_err(runtime)?;

    let out_path =
        out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir().join("report.json"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(&out_path, serde_json::to_vec_pretty(&report).expect("serialize"))
        .map_err(|e| runtime(format!("{}: {e}", out_path.display())))?;
    print!("{}", report.render_table());
    println!("report written to {}", out_path.display());
    Ok(())
}

fn cmd_analyze(cfg: &AppConfig, what: AnalyzeCommand) -> Result<(), Failure> {
    let load_ctx = |ckpt_dir: &Option<PathBuf>| -> Result<
        (ToyBackend, Option<ndarray::Array1<f64>>),
        Failure,
    > {
        match ckpt_dir {
            Some(dir) => {
                let ckpt = CheckpointBundle::load(dir).map_err(runtime)?;
                let backend = restore_toy_backend(&ckpt).map_err(runtime)?;
                let v = ndarray::Array1::from_vec(ckpt.vector.clone());
                Ok((backend, Some(v)))
            }
            None => Ok((require_toy_backend(cfg)?, None)),
        }
    };

    match what {
        AnalyzeCommand::Sim { prompt_a, prompt_b, checkpoint, out } => {
            let (backend, vector) = load_ctx(&checkpoint)?;
            let matrix = ctxreg::analysis::similarity_matrix(
                &backend,
                &prompt_a,
                &prompt_b,
                vector.as_ref(),
            )
            .map_err(runtime)?;
            let out_path = out.unwrap_or_else(|| cfg.output_dir().join("analysis/sim.png"));
            if let Some(parent) = out_path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
            }
            ctxreg::analysis::emit_similarity_plot(&matrix, &out_path).map_err(runtime)?;
            println!("similarity matrix written to {}", out_path.display());
        }
        AnalyzeCommand::Attn { prompt, checkpoint, out } => {
            let (backend, vector) = load_ctx(&checkpoint)?;
            let grid =
                ctxreg::analysis::attention_grid(&backend, &prompt, vector.as_ref(), cfg.seed())
                    .map_err(runtime)?;
            let out_path = out.unwrap_or_else(|| cfg.output_dir().join("analysis/attn.png"));
            if let Some(parent) = out_path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
            }
            ctxreg::analysis::emit_grid_plot(&grid, &out_path).map_err(runtime)?;
            println!("attention grid written to {}", out_path.display());
        }
    }
    Ok(())
}

fn cmd_prompts(what: PromptsCommand) -> Result<(), Failure> {
    match what {
        PromptsCommand::Validate { file, audience } => {
            let audience = match audience {
                AudienceArg::Animate => Audience::Animate,
                AudienceArg::Inanimate => Audience::Inanimate,
            };
            let set = load_prompt_set(&file, audience).map_err(validation)?;
            println!("OK: {} templates in {}", set.len(), file.display());
            Ok(())
        }
    }
}
