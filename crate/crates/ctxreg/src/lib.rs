//! Concept personalization for text-conditioned diffusion models.
//!
//! Learns an input embedding for a new concept token by combining the
//! denoising objective with two regularizers computed on the *context
//! tokens* of a concept/reference prompt pair: a cosine penalty on the
//! text encoder's output embeddings and a squared penalty on per-token
//! cross-attention means. A two-stage schedule first optimizes the
//! concept vector, then freezes it and fine-tunes the denoiser. The
//! same regularizers can refine a per-prompt copy of the vector at
//! test time.
//!
//! Everything runs on a deterministic 64-bit toy encoder/denoiser so
//! losses, gradients and schedules are verifiable on a CPU; an adapter
//! seam exists for binding a real latent-diffusion backend.

pub mod adapter;
pub mod analysis;
pub mod autodiff;
pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod losses;
pub mod plot;
pub mod prompts;
pub mod refine;
pub mod rng;
pub mod toy;
pub mod train;
