//! The learnable concept vector: initialization from the super-category
//! row, injection into the encoder input sequence, and norm rescaling.

use crate::autodiff::{Graph, NodeId};
use crate::backend::{table_sequence, Backend, BackendError, SeqNode, Side, TokenId};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("concept vector contains non-finite values after step {0}")]
    NonFinite(u64),
    #[error("cannot rescale: current norm {0} is too small to define a direction")]
    DegenerateNorm(f64),
    #[error("no recorded previous norm to rescale to")]
    NoHistory,
    #[error("injection span {start}..{end} does not cover placeholder ids")]
    SpanMismatch { start: usize, end: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Training window during which rescaling applies; half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RescaleWindow {
    pub start_step: u64,
    pub end_step: u64,
}

impl RescaleWindow {
    pub fn new(start_step: u64, end_step: u64) -> Self {
        assert!(start_step < end_step, "rescale window must be non-empty");
        Self { start_step, end_step }
    }
}

/// `true` iff `start_step <= step < end_step`.
pub fn should_rescale(step: u64, window: &RescaleWindow) -> bool {
    step >= window.start_step && step < window.end_step
}

/// The concept's input embedding together with its optimization
/// step counter and norm history.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    pub vector: Array1<f64>,
    pub step: u64,
    /// `(step, norm)` pairs, append-only, strictly increasing in step.
    /// Entry 0 records the initialization norm.
    pub norm_history: Vec<(u64, f64)>,
}

impl ConceptEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.dot(&self.vector).sqrt()
    }

    pub fn validate_finite(&self) -> Result<(), EmbeddingError> {
        if self.vector.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(EmbeddingError::NonFinite(self.step))
        }
    }

    /// Appends the post-step norm for `step`; panics if steps regress.
    pub fn record_norm(&mut self, step: u64) {
        if let Some(&(last, _)) = self.norm_history.last() {
            assert!(step > last, "norm history must advance");
        }
        self.norm_history.push((step, self.norm()));
    }

    /// Restores the previous step's recorded norm, keeping direction.
    /// Returns the norm that was restored.
    pub fn rescale_to_previous_norm(&mut self) -> Result<f64, EmbeddingError> {
        let &(_, prev) = self.norm_history.last().ok_or(EmbeddingError::NoHistory)?;
        self.vector = rescale_vector(&self.vector, prev)?;
        Ok(prev)
    }
}

/// `v * prev_norm / ||v||`: same direction, previous norm.
pub fn rescale_vector(v: &Array1<f64>, prev_norm: f64) -> Result<Array1<f64>, EmbeddingError> {
    let cur = v.dot(v).sqrt();
    if cur < 1e-300 {
        return Err(EmbeddingError::DegenerateNorm(cur));
    }
    Ok(v * (prev_norm / cur))
}

/// Copies the super-category's input embedding (first sub-token when the
/// category spans several) as the starting concept vector.
pub fn init_concept_embedding(
    concept: &crate::prompts::ConceptSpec,
    backend: &dyn Backend,
) -> Result<ConceptEmbedding, EmbeddingError> {
    let (_, super_ids) = concept
        .resolve(backend.vocab())
        .map_err(|e| match e {
            crate::prompts::PromptError::Backend(b) => EmbeddingError::Backend(b),
            other => EmbeddingError::Backend(BackendError::UnknownWord(other.to_string())),
        })?;
    let row = backend.embedding_table().row(super_ids[0].0 as usize).to_owned();
    let mut e = ConceptEmbedding { vector: row, step: 0, norm_history: Vec::new() };
    e.record_norm(0);
    Ok(e)
}

/// Builds the input-side sequence for `ids` on the tape, replacing the
/// rows in `span` with the concept-vector node so gradients flow back to
/// it. An empty span is a pure table lookup.
pub fn inject(
    g: &mut Graph,
    backend: &dyn Backend,
    ids: &[TokenId],
    placeholder_id: TokenId,
    concept_node: NodeId,
    span: std::ops::Range<usize>,
    real_len: usize,
) -> Result<SeqNode, EmbeddingError> {
    if span.end > ids.len() {
        return Err(EmbeddingError::SpanMismatch { start: span.start, end: span.end });
    }
    if span.clone().any(|i| ids[i] != placeholder_id) {
        return Err(EmbeddingError::SpanMismatch { start: span.start, end: span.end });
    }
    let base = table_sequence(backend, ids)?;
    let node = if span.is_empty() {
        g.constant(base.into_dyn())
    } else {
        g.inject_rows(&base, concept_node, span)
    };
    Ok(SeqNode { node, side: Side::Input, real_len })
}
