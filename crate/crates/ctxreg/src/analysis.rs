//! Diagnostics: token-wise output-embedding similarity matrices and
//! per-token cross-attention heat maps.
//!
//! Both operate on real tokens (specials included). Prompts may contain
//! an angle-bracketed concept token, in which case a concept vector must
//! be supplied for injection. Attention maps are recorded from a single
//! seeded denoiser pass at the schedule midpoint, layer-averaged after
//! nearest-neighbor upsampling to the finest recorded resolution; this
//! is visualization only and never feeds the attention regularizer.

use crate::autodiff::Graph;
use crate::backend::{denoise_value, Backend, BackendError, ParamBinding, TokenId};
use crate::embedding::{inject, EmbeddingError};
use crate::plot::PlotError;
use crate::prompts::{tokenize_words, PromptError};
use ndarray::{Array1, Array2};
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("prompt contains the concept token but no concept vector was supplied")]
    MissingConceptVector,
    #[error("prompt must contain the concept token at most once")]
    MultipleConceptTokens,
    #[error("output embedding row {0} has zero norm; cosine undefined")]
    ZeroNorm(usize),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pairwise cosine matrix between two prompts' output embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl SimilarityMatrix {
    pub fn as_array(&self) -> Array2<f64> {
        let rows = self.values.len();
        let cols = self.values.first().map(|r| r.len()).unwrap_or(0);
        let mut m = Array2::zeros((rows, cols));
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Mean of diagonal entries excluding the given positions.
    pub fn mean_diagonal_excluding(&self, excluded: &[usize]) -> f64 {
        let n = self.values.len().min(self.values.first().map(|r| r.len()).unwrap_or(0));
        let kept: Vec<f64> = (0..n)
            .filter(|i| !excluded.contains(i))
            .map(|i| self.values[i][i])
            .collect();
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

/// Per-token layer-averaged attention maps on a common grid.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionGrid {
    pub maps: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<String>,
    pub height: usize,
    pub width: usize,
}

impl AttentionGrid {
    pub fn token_count(&self) -> usize {
        self.maps.len()
    }

    pub fn map_array(&self, token: usize) -> Array2<f64> {
        let mut m = Array2::zeros((self.height, self.width));
        for (y, row) in self.maps[token].iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                m[(y, x)] = v;
            }
        }
        m
    }
}

/// Tokenized prompt: padded ids, labels and the concept position if any.
struct AnalyzedPrompt {
    ids: Vec<TokenId>,
    labels: Vec<String>,
    real_len: usize,
    concept_at: Option<usize>,
}

fn analyze_prompt(backend: &dyn Backend, text: &str) -> Result<AnalyzedPrompt, AnalysisError> {
    let vocab = backend.vocab();
    let word_ids = tokenize_words(vocab, text)?;
    let real_len = word_ids.len() + 2;
    if real_len > backend.seq_len() {
        return Err(AnalysisError::Backend(BackendError::PromptTooLong {
            needed: real_len,
            seq_len: backend.seq_len(),
        }));
    }
    let mut ids = Vec::with_capacity(backend.seq_len());
    ids.push(vocab.bos_id());
    ids.extend_from_slice(&word_ids);
    ids.push(vocab.eos_id());
    while ids.len() < backend.seq_len() {
        ids.push(vocab.pad_id());
    }

    let mut labels = vec!["<bos>".to_string()];
    for word in text.split_whitespace() {
        labels.push(word.to_lowercase());
    }
    labels.push("<eos>".to_string());

    let placeholder = vocab.encode_word("<s*>").map(|v| v[0]).ok();
    let concept_positions: Vec<usize> = match placeholder {
        Some(ph) => (0..real_len).filter(|&i| ids[i] == ph).collect(),
        None => Vec::new(),
    };
    let concept_at = match concept_positions.len() {
        0 => None,
        1 => Some(concept_positions[0]),
        _ => return Err(AnalysisError::MultipleConceptTokens),
    };
    Ok(AnalyzedPrompt { ids, labels, real_len, concept_at })
}

/// Output embeddings for a prompt, injecting `vector` at the concept
/// position when present.
fn encode_prompt(
    backend: &dyn Backend,
    prompt: &AnalyzedPrompt,
    vector: Option<&Array1<f64>>,
) -> Result<Array2<f64>, AnalysisError> {
    let mut g = Graph::new();
    let mut binding = ParamBinding::new();
    let span = match prompt.concept_at {
        Some(k) => {
            if vector.is_none() {
                return Err(AnalysisError::MissingConceptVector);
            }
            k..k + 1
        }
        None => 0..0,
    };
    let v_node = match vector {
        Some(v) => g.constant(v.clone().into_dyn()),
        None => g.constant(Array1::<f64>::zeros(backend.embed_dim()).into_dyn()),
    };
    let ph = backend.vocab().encode_word("<s*>")?[0];
    let seq = inject(&mut g, backend, &prompt.ids, ph, v_node, span, prompt.real_len)?;
    let out = backend.encode_graph(&mut g, seq, &mut binding)?;
    Ok(g.value(out.node).clone().into_dimensionality::<ndarray::Ix2>().unwrap())
}

/// Full pairwise cosine matrix between the real-token output embeddings
/// of two prompts.
pub fn similarity_matrix(
    backend: &dyn Backend,
    prompt_a: &str,
    prompt_b: &str,
    vector: Option<&Array1<f64>>,
) -> Result<SimilarityMatrix, AnalysisError> {
    let pa = analyze_prompt(backend, prompt_a)?;
    let pb = analyze_prompt(backend, prompt_b)?;
    let ea = encode_prompt(backend, &pa, vector)?;
    let eb = encode_prompt(backend, &pb, vector)?;

    let mut values = vec![vec![0.0; pb.real_len]; pa.real_len];
    for i in 0..pa.real_len {
        let ra = ea.row(i);
        let na = ra.dot(&ra).sqrt();
        if na < 1e-12 {
            return Err(AnalysisError::ZeroNorm(i));
        }
        for j in 0..pb.real_len {
            let rb = eb.row(j);
            let nb = rb.dot(&rb).sqrt();
            if nb < 1e-12 {
                return Err(AnalysisError::ZeroNorm(j));
            }
            values[i][j] = ra.dot(&rb) / (na * nb);
        }
    }
    Ok(SimilarityMatrix { values, row_labels: pa.labels, col_labels: pb.labels })
}

fn upsample_nearest(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            let sy = y * h / out_h;
            let sx = x * w / out_w;
            out[(y, x)] = map[(sy, sx)];
        }
    }
    out
}

/// Records one seeded denoiser pass at the schedule midpoint and returns
/// the per-token maps averaged over layers on the finest grid.
pub fn attention_grid(
    backend: &dyn Backend,
    prompt: &str,
    vector: Option<&Array1<f64>>,
    seed: u64,
) -> Result<AttentionGrid, AnalysisError> {
    let pa = analyze_prompt(backend, prompt)?;
    let out = encode_prompt(backend, &pa, vector)?;
    let cond = crate::backend::EmbeddingSequence::new(
        out,
        crate::backend::Side::Output,
        pa.real_len,
    );

    let p = backend.latent_positions();
    let c = backend.latent_channels();
    let mut rng = crate::rng::stream(seed, "analysis.latent");
    let z_t = crate::rng::normal_array2(&mut rng, p, c, 1.0);
    let t = backend.schedule().steps() / 2;
    let (_, rec) = denoise_value(backend, &z_t, t, &cond)?;

    let (grid_h, grid_w) = backend.latent_grid();
    // per-layer grids scale with the recorded position count; the finest
    // recorded resolution wins
    let layer_dims: Vec<(usize, usize)> = rec
        .per_layer
        .iter()
        .map(|m| {
            let positions = m.nrows();
            let scale = ((positions as f64) / (grid_h * grid_w) as f64).sqrt();
            let h = ((grid_h as f64) * scale).round() as usize;
            (h.max(1), (positions / h.max(1)).max(1))
        })
        .collect();
    let fine_h = layer_dims.iter().map(|&(h, _)| h).max().unwrap_or(grid_h);
    let fine_w = layer_dims.iter().map(|&(_, w)| w).max().unwrap_or(grid_w);

    let mut maps = Vec::with_capacity(pa.real_len);
    for token in 0..pa.real_len {
        let mut acc = Array2::<f64>::zeros((fine_h, fine_w));
        for (layer, m) in rec.per_layer.iter().enumerate() {
            let (h, w) = layer_dims[layer];
            let col = m.column(token);
            let mut grid = Array2::zeros((h, w));
            for (i, &v) in col.iter().enumerate() {
                grid[(i / w, i % w)] = v;
            }
            acc = acc + upsample_nearest(&grid, fine_h, fine_w);
        }
        acc /= rec.per_layer.len() as f64;
        maps.push(acc.rows().into_iter().map(|r| r.to_vec()).collect());
    }
    Ok(AttentionGrid {
        maps,
        labels: pa.labels,
        height: fine_h,
        width: fine_w,
    })
}

/// Writes the heatmap image plus a JSON dump next to it.
pub fn emit_similarity_plot(
    matrix: &SimilarityMatrix,
    out_path: &Path,
) -> Result<(), AnalysisError> {
    crate::plot::save_matrix_heatmap(
        &matrix.as_array(),
        &matrix.row_labels,
        &matrix.col_labels,
        out_path,
    )?;
    let dump = out_path.with_extension("json");
    std::fs::write(&dump, serde_json::to_vec_pretty(matrix).expect("serialize")).map_err(
        |source| AnalysisError::Io { path: dump.display().to_string(), source },
    )?;
    Ok(())
}

/// Writes the per-token panel image plus a JSON dump next to it.
pub fn emit_grid_plot(grid: &AttentionGrid, out_path: &Path) -> Result<(), AnalysisError> {
    let maps: Vec<Array2<f64>> = (0..grid.token_count()).map(|i| grid.map_array(i)).collect();
    crate::plot::save_map_panels(&maps, &grid.labels, out_path)?;
    let dump = out_path.with_extension("json");
    std::fs::write(&dump, serde_json::to_vec_pretty(grid).expect("serialize")).map_err(
        |source| AnalysisError::Io { path: dump.display().to_string(), source },
    )?;
    Ok(())
}
