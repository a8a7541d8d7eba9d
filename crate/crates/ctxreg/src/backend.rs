//! Text-encoder / denoiser seam.
//!
//! The training loop, the refiner and the analysis tools all talk to a
//! [`Backend`]: vocabulary lookup, embedding-table access, encoding,
//! denoising with cross-attention recording, noise-schedule queries and
//! weight-group freezing. The toy stack implements it natively; a real
//! latent-diffusion adapter binds behind the same trait.
//!
//! Forward passes are expressed on the autodiff tape so gradients reach
//! both the injected concept vector and (when unfrozen) the denoiser
//! weights. Value-plane helpers wrap a throwaway tape for callers that
//! only need numbers.

use crate::autodiff::{Graph, NodeId};
use ndarray::{Array2, ArrayD};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("prompt needs {needed} token positions but the encoder sequence length is {seq_len}")]
    PromptTooLong { needed: usize, seq_len: usize },
    #[error("timestep {t} outside schedule range 0..{steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("expected {expected:?}-side embedding sequence, got {got:?}")]
    SideMismatch { expected: Side, got: Side },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("attention layer count mismatch: {a} vs {b}")]
    LayerCountMismatch { a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TokenId(pub u32);

/// Which side of the text encoder an embedding sequence lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Input,
    Output,
}

/// Fixed-length token-embedding matrix tagged with its encoder side and
/// the count of real (pre-padding) tokens, specials included.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub matrix: Array2<f64>,
    pub side: Side,
    pub real_len: usize,
}

impl EmbeddingSequence {
    pub fn new(matrix: Array2<f64>, side: Side, real_len: usize) -> Self {
        assert!(real_len >= 1 && real_len <= matrix.nrows());
        Self { matrix, side, real_len }
    }
}

/// Graph-plane twin of [`EmbeddingSequence`]: the matrix lives on the tape.
#[derive(Debug, Clone, Copy)]
pub struct SeqNode {
    pub node: NodeId,
    pub side: Side,
    pub real_len: usize,
}

/// How per-token attention means aggregate across layers of differing
/// spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum MeanMode {
    /// Spatial mean per layer, then unweighted average over layers.
    #[default]
    PerLayer,
    /// Single mean over all values of all layers (weights layers by
    /// their spatial resolution).
    Flat,
}

/// Post-softmax cross-attention probabilities from one denoiser pass,
/// head-averaged, one `(positions, seq_len)` matrix per layer.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub per_layer: Vec<Array2<f64>>,
}

impl AttentionRecord {
    pub fn layer_count(&self) -> usize {
        self.per_layer.len()
    }

    /// Checks that attention over the token axis sums to 1 at every
    /// spatial position of every layer.
    pub fn validate_normalization(&self, tol: f64) -> bool {
        self.per_layer
            .iter()
            .all(|m| m.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= tol))
    }
}

/// Mean attention received by one token: spatial mean per layer averaged
/// over layers (or a flat mean over all values, by mode).
pub fn mean_attention_mode(rec: &AttentionRecord, token_index: usize, mode: MeanMode) -> f64 {
    match mode {
        MeanMode::PerLayer => {
            let l = rec.per_layer.len() as f64;
            rec.per_layer
                .iter()
                .map(|m| m.column(token_index).mean().unwrap())
                .sum::<f64>()
                / l
        }
        MeanMode::Flat => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for m in &rec.per_layer {
                sum += m.column(token_index).sum();
                count += m.nrows();
            }
            sum / count as f64
        }
    }
}

pub fn mean_attention(rec: &AttentionRecord, token_index: usize) -> f64 {
    mean_attention_mode(rec, token_index, MeanMode::PerLayer)
}

/// Denoiser forward outputs on the tape: the noise prediction and one
/// post-softmax attention-map node per cross-attention layer.
pub struct DenoisePass {
    pub noise_pred: NodeId,
    pub attn: Vec<NodeId>,
}

impl DenoisePass {
    /// Materializes the recorded maps off the tape.
    pub fn record(&self, g: &Graph) -> AttentionRecord {
        AttentionRecord {
            per_layer: self
                .attn
                .iter()
                .map(|&id| {
                    g.value(id)
                        .clone()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightGroup {
    TextEncoder,
    Denoiser,
}

/// Per-session map from parameter name to tape node.
///
/// Backends consult it before inserting a weight so that repeated
/// forward passes inside one tape share nodes; gradient contributions
/// from every pass then accumulate on a single leaf.
#[derive(Default)]
pub struct ParamBinding {
    entries: Vec<(String, NodeId, bool)>,
}

impl ParamBinding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(
        &mut self,
        g: &mut Graph,
        name: &str,
        value: &ArrayD<f64>,
        trainable: bool,
    ) -> NodeId {
        if let Some((_, id, _)) = self.entries.iter().find(|(n, _, _)| n == name) {
            return *id;
        }
        let id = if trainable {
            g.leaf(value.clone())
        } else {
            g.constant(value.clone())
        };
        self.entries.push((name.to_string(), id, trainable));
        id
    }

    /// Parameters inserted as trainable leaves, in insertion order.
    pub fn trainable(&self) -> Vec<(String, NodeId)> {
        self.entries
            .iter()
            .filter(|(_, _, t)| *t)
            .map(|(n, id, _)| (n.clone(), *id))
            .collect()
    }
}

/// Diffusion noising schedule; `alpha_bar` is the cumulative product of
/// the per-step retention factors.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule over `steps` timesteps.
    pub fn linear(steps: usize) -> Self {
        let beta_start = 1e-4;
        let beta_end = 0.02;
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for t in 0..steps {
            let frac = if steps > 1 { t as f64 / (steps - 1) as f64 } else { 0.0 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Self { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, BackendError> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(BackendError::TimestepOutOfRange { t, steps: self.alpha_bar.len() })
    }

    /// Forward-noised latent `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
    pub fn noised(
        &self,
        z0: &Array2<f64>,
        eps: &Array2<f64>,
        t: usize,
    ) -> Result<Array2<f64>, BackendError> {
        let ab = self.alpha_bar(t)?;
        Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }
}

/// Word-level vocabulary with reserved special tokens.
pub trait Vocabulary {
    /// Token ids for one word; multi-token words return more than one id.
    fn encode_word(&self, word: &str) -> Result<Vec<TokenId>, BackendError>;
    fn token_text(&self, id: TokenId) -> String;
    fn pad_id(&self) -> TokenId;
    fn bos_id(&self) -> TokenId;
    fn eos_id(&self) -> TokenId;
}

pub trait Backend {
    fn vocab(&self) -> &dyn Vocabulary;
    fn seq_len(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn latent_positions(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn latent_grid(&self) -> (usize, usize);
    fn attn_layer_count(&self) -> usize;
    fn embedding_table(&self) -> &Array2<f64>;
    fn schedule(&self) -> &NoiseSchedule;

    fn set_trainable(&mut self, group: WeightGroup, trainable: bool);
    fn is_trainable(&self, group: WeightGroup) -> bool;

    /// Encoder forward on the tape. `input` must be input-side and of
    /// shape `(seq_len, embed_dim)`.
    fn encode_graph(
        &self,
        g: &mut Graph,
        input: SeqNode,
        binding: &mut ParamBinding,
    ) -> Result<SeqNode, BackendError>;

    /// Denoiser forward on the tape with attention recording. `z_t` is
    /// `(latent_positions, latent_channels)`; `cond` must be output-side.
    fn denoise_graph(
        &self,
        g: &mut Graph,
        z_t: NodeId,
        t: usize,
        cond: SeqNode,
        binding: &mut ParamBinding,
    ) -> Result<DenoisePass, BackendError>;

    /// Stable names of the parameters in a group.
    fn param_names(&self, group: WeightGroup) -> Vec<String>;

    /// Adds `delta` to the named parameter in place.
    fn apply_param_update(&mut self, name: &str, delta: &ArrayD<f64>) -> Result<(), BackendError>;

    /// Digest of a weight group's raw values, for freeze assertions.
    fn weights_digest(&self, group: WeightGroup) -> [u8; 32];

    /// Raw weights of a group as `(name, values, shape)` triples.
    fn export_weights(&self, group: WeightGroup) -> Vec<(String, Vec<f64>, Vec<usize>)>;

    /// Restores weights previously produced by [`Backend::export_weights`].
    fn import_weights(
        &mut self,
        group: WeightGroup,
        weights: &[(String, Vec<f64>, Vec<usize>)],
    ) -> Result<(), BackendError>;
}

/// Base input-side sequence for a padded id sequence: plain table rows.
pub fn table_sequence(backend: &dyn Backend, ids: &[TokenId]) -> Result<Array2<f64>, BackendError> {
    let table = backend.embedding_table();
    if ids.len() != backend.seq_len() {
        return Err(BackendError::ShapeMismatch {
            expected: vec![backend.seq_len()],
            got: vec![ids.len()],
        });
    }
    let mut m = Array2::zeros((ids.len(), backend.embed_dim()));
    for (i, id) in ids.iter().enumerate() {
        m.row_mut(i).assign(&table.row(id.0 as usize));
    }
    Ok(m)
}

/// Value-plane encode: runs one throwaway tape.
pub fn encode_value(
    backend: &dyn Backend,
    seq: &EmbeddingSequence,
) -> Result<EmbeddingSequence, BackendError> {
    if seq.side != Side::Input {
        return Err(BackendError::SideMismatch { expected: Side::Input, got: seq.side });
    }
    let mut g = Graph::new();
    let mut binding = ParamBinding::new();
    let input = g.constant(seq.matrix.clone().into_dyn());
    let out = backend.encode_graph(
        &mut g,
        SeqNode { node: input, side: Side::Input, real_len: seq.real_len },
        &mut binding,
    )?;
    Ok(EmbeddingSequence::new(
        g.value(out.node).clone().into_dimensionality::<ndarray::Ix2>().unwrap(),
        Side::Output,
        seq.real_len,
    ))
}

/// Value-plane denoise with recording: runs one throwaway tape.
pub fn denoise_value(
    backend: &dyn Backend,
    z_t: &Array2<f64>,
    t: usize,
    cond: &EmbeddingSequence,
) -> Result<(Array2<f64>, AttentionRecord), BackendError> {
    if cond.side != Side::Output {
        return Err(BackendError::SideMismatch { expected: Side::Output, got: cond.side });
    }
    let mut g = Graph::new();
    let mut binding = ParamBinding::new();
    let z = g.constant(z_t.clone().into_dyn());
    let c = g.constant(cond.matrix.clone().into_dyn());
    let pass = backend.denoise_graph(
        &mut g,
        z,
        t,
        SeqNode { node: c, side: Side::Output, real_len: cond.real_len },
        &mut binding,
    )?;
    let pred = g
        .value(pass.noise_pred)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let rec = pass.record(&g);
    Ok((pred, rec))
}

/// Interface conformance checks shared by every backend implementation:
/// shape contracts, softmax normalization, determinism and freeze
/// semantics. Panics on violation.
pub mod conformance {
    use super::*;

    pub fn run_all(backend: &mut dyn Backend) {
        encode_shape_and_determinism(backend);
        attention_normalization(backend);
        freeze_semantics(backend);
    }

    pub fn encode_shape_and_determinism(backend: &dyn Backend) {
        let n = backend.seq_len();
        let d = backend.embed_dim();
        let mut m = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                m[(i, j)] = ((i * d + j) as f64 * 0.37).sin() * 0.1;
            }
        }
        let seq = EmbeddingSequence::new(m, Side::Input, n);
        let a = encode_value(backend, &seq).expect("encode");
        let b = encode_value(backend, &seq).expect("encode");
        assert_eq!(a.matrix.shape(), seq.matrix.shape(), "encode must preserve shape");
        assert_eq!(a.side, Side::Output);
        assert_eq!(a.matrix, b.matrix, "encode must be deterministic");
    }

    pub fn attention_normalization(backend: &dyn Backend) {
        let n = backend.seq_len();
        let d = backend.embed_dim();
        let p = backend.latent_positions();
        let c = backend.latent_channels();
        let mut cond = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                cond[(i, j)] = ((i + 2 * j) as f64 * 0.11).cos() * 0.2;
            }
        }
        let cond = encode_value(backend, &EmbeddingSequence::new(cond, Side::Input, n)).unwrap();
        let mut z = Array2::zeros((p, c));
        for i in 0..p {
            for j in 0..c {
                z[(i, j)] = ((i * c + j) as f64 * 0.23).sin();
            }
        }
        let (pred, rec) = denoise_value(backend, &z, 0, &cond).expect("denoise");
        assert_eq!(pred.shape(), z.shape(), "noise prediction must match latent shape");
        assert_eq!(rec.layer_count(), backend.attn_layer_count());
        assert!(rec.validate_normalization(1e-9), "attention rows must sum to 1");
        for m in &rec.per_layer {
            assert_eq!(m.ncols(), n, "token axis must span the sequence");
            assert!(m.iter().all(|&x| x >= 0.0), "attention must be non-negative");
        }
    }

    pub fn freeze_semantics(backend: &mut dyn Backend) {
        backend.set_trainable(WeightGroup::Denoiser, false);
        backend.set_trainable(WeightGroup::TextEncoder, false);
        let enc0 = backend.weights_digest(WeightGroup::TextEncoder);
        let den0 = backend.weights_digest(WeightGroup::Denoiser);

        // a full forward/backward pass must leave frozen groups untouched
        let n = backend.seq_len();
        let d = backend.embed_dim();
        let seq = EmbeddingSequence::new(Array2::from_elem((n, d), 0.05), Side::Input, n);
        let _ = encode_value(&*backend, &seq).unwrap();
        assert_eq!(enc0, backend.weights_digest(WeightGroup::TextEncoder));
        assert_eq!(den0, backend.weights_digest(WeightGroup::Denoiser));

        // an update applied to an unfrozen group must change its digest only
        backend.set_trainable(WeightGroup::Denoiser, true);
        let names = backend.param_names(WeightGroup::Denoiser);
        assert!(!names.is_empty());
        let weights = backend.export_weights(WeightGroup::Denoiser);
        let (name, _, shape) = &weights[0];
        let delta = ArrayD::from_elem(ndarray::IxDyn(shape), 1e-3);
        backend.apply_param_update(name, &delta).unwrap();
        assert_ne!(den0, backend.weights_digest(WeightGroup::Denoiser));
        assert_eq!(enc0, backend.weights_digest(WeightGroup::TextEncoder));
        // restore
        let neg = ArrayD::from_elem(ndarray::IxDyn(shape), -1e-3);
        backend.apply_param_update(name, &neg).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn mean_attention_uniform_maps() {
        // uniform softmax over 4 tokens: every token's mean is 1/4
        let rec = AttentionRecord {
            per_layer: vec![Array2::from_elem((6, 4), 0.25), Array2::from_elem((3, 4), 0.25)],
        };
        for i in 0..4 {
            assert!((mean_attention(&rec, i) - 0.25).abs() < 1e-15);
        }
        assert!(rec.validate_normalization(1e-12));
    }

    #[test]
    fn mean_attention_two_layer_average() {
        // token 0 column: 0.2 in one layer, 0.4 in the other -> 0.3
        let l1 = arr2(&[[0.2, 0.8], [0.2, 0.8]]);
        let l2 = arr2(&[[0.4, 0.6], [0.4, 0.6], [0.4, 0.6]]);
        let rec = AttentionRecord { per_layer: vec![l1, l2] };
        assert!((mean_attention(&rec, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mean_attention_flat_weights_by_resolution() {
        let l1 = arr2(&[[0.2, 0.8]]); // 1 position
        let l2 = arr2(&[[0.4, 0.6], [0.4, 0.6], [0.4, 0.6]]); // 3 positions
        let rec = AttentionRecord { per_layer: vec![l1, l2] };
        let flat = mean_attention_mode(&rec, 0, MeanMode::Flat);
        assert!((flat - (0.2 + 3.0 * 0.4) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn mean_attention_matches_double_loop_oracle() {
        let mut rng = crate::rng::stream(11, "backend.oracle");
        let layers: Vec<Array2<f64>> = (0..3)
            .map(|l| {
                let raw = crate::rng::normal_array2(&mut rng, 4 + l, 5, 1.0);
                let mut m = raw.mapv(f64::exp);
                for mut row in m.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|x| x / s);
                }
                m
            })
            .collect();
        let rec = AttentionRecord { per_layer: layers.clone() };
        for token in 0..5 {
            let mut acc = 0.0;
            for m in &layers {
                let mut s = 0.0;
                for p in 0..m.nrows() {
                    s += m[(p, token)];
                }
                acc += s / m.nrows() as f64;
            }
            let oracle = acc / layers.len() as f64;
            assert!((mean_attention(&rec, token) - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_attention_sums_to_one_over_tokens() {
        let mut rng = crate::rng::stream(12, "backend.sum");
        let layers: Vec<Array2<f64>> = (0..4)
            .map(|_| {
                let raw = crate::rng::normal_array2(&mut rng, 7, 6, 1.0);
                let mut m = raw.mapv(f64::exp);
                for mut row in m.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|x| x / s);
                }
                m
            })
            .collect();
        let rec = AttentionRecord { per_layer: layers };
        let total: f64 = (0..6).map(|i| mean_attention(&rec, i)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_bounds() {
        let s = NoiseSchedule::linear(100);
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bar(0).unwrap() > s.alpha_bar(99).unwrap());
        assert!(matches!(
            s.alpha_bar(100),
            Err(BackendError::TimestepOutOfRange { .. })
        ));
    }
}
