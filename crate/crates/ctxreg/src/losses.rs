//! The optimization objective: denoising loss, the two context
//! regularizers, and their weighted combination.
//!
//! Both regularizers compare a concept prompt against its super-category
//! reference prompt and range over aligned *context* positions only; the
//! concept slot is excluded on both sides and never read, so no direct
//! constraint ties the concept to its super-category. The embedding term
//! is the mean cosine distance between corresponding encoder outputs;
//! the attention term is the mean squared difference between per-token
//! attention means across the denoiser's cross-attention layers.

use crate::autodiff::{Graph, NodeId};
use crate::backend::{MeanMode, SeqNode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("no context positions to regularize")]
    EmptyContext,
    #[error("context row {index} has near-zero norm; cosine is undefined")]
    ZeroNormRow { index: usize },
    #[error("attention layer counts differ: {a} vs {b}")]
    LayerCountMismatch { a: usize, b: usize },
    #[error("context index {index} out of bounds for {len} rows")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("loss part {part:?} is not finite ({value})")]
    NonFinite { part: &'static str, value: f64 },
}

/// Regularizer weights; zero disables a term entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_emb: f64,
    pub lambda_attn: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (part, v) in [("lambda_emb", self.lambda_emb), ("lambda_attn", self.lambda_attn)] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::NonFinite { part, value: v });
            }
        }
        Ok(())
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub emb: f64,
    pub attn: f64,
    pub total: f64,
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(g: &mut Graph, eps_true: NodeId, eps_pred: NodeId) -> Result<NodeId, LossError> {
    let a = g.value(eps_true).shape().to_vec();
    let b = g.value(eps_pred).shape().to_vec();
    if a != b {
        return Err(LossError::ShapeMismatch { a, b });
    }
    let d = g.sub(eps_true, eps_pred);
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// Position-aligned `(star, reference)` index pairs excluding a span,
/// for sequences whose context tokens line up one-to-one.
pub fn context_pairs_excluding(
    limit: usize,
    excluded: std::ops::Range<usize>,
) -> Vec<(usize, usize)> {
    (0..limit).filter(|i| !excluded.contains(i)).map(|i| (i, i)).collect()
}

/// Mean cosine distance between corresponding context rows of the two
/// output-side sequences. `pairs` lists the aligned `(star_row, ref_row)`
/// context positions; excluded rows are never read.
pub fn context_embedding_loss(
    g: &mut Graph,
    out_star: SeqNode,
    out_ref: SeqNode,
    pairs: &[(usize, usize)],
) -> Result<NodeId, LossError> {
    let a = g.value(out_star.node).shape().to_vec();
    let b = g.value(out_ref.node).shape().to_vec();
    if a != b {
        return Err(LossError::ShapeMismatch { a, b });
    }
    if pairs.is_empty() {
        return Err(LossError::EmptyContext);
    }
    let rows = a[0];
    for &(i, j) in pairs {
        if i >= rows || j >= rows {
            return Err(LossError::IndexOutOfBounds { index: i.max(j), len: rows });
        }
    }
    // reject degenerate rows up front: silently skipping them would
    // change the denominator and corrupt gradients
    for (node, side) in [(out_star.node, 0usize), (out_ref.node, 1usize)] {
        let m = g.value(node);
        let m = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for &(i, j) in pairs {
            let idx = if side == 0 { i } else { j };
            let row = m.row(idx);
            if row.dot(&row).sqrt() < 1e-12 {
                return Err(LossError::ZeroNormRow { index: idx });
            }
        }
    }

    let star_idx: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let ref_idx: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let s = g.select_rows(out_star.node, &star_idx);
    let r = g.select_rows(out_ref.node, &ref_idx);

    let prod = g.mul(s, r);
    let dots = g.row_sum(prod);
    let s_sq = g.square(s);
    let s_ss = g.row_sum(s_sq);
    let s_norm = g.sqrt(s_ss);
    let r_sq = g.square(r);
    let r_ss = g.row_sum(r_sq);
    let r_norm = g.sqrt(r_ss);
    let denom = g.mul(s_norm, r_norm);
    let cos = g.div(dots, denom);
    let neg = g.neg(cos);
    let dist = g.add_scalar(neg, 1.0);
    let total = g.sum_all(dist);
    Ok(g.scale(total, 1.0 / pairs.len() as f64))
}

/// Per-token attention mean as a `(n, 1)` column node: spatial mean per
/// layer, then layer average (or a flat mean over all values).
pub fn token_attention_means(
    g: &mut Graph,
    maps: &[NodeId],
    mode: MeanMode,
) -> Result<NodeId, LossError> {
    if maps.is_empty() {
        return Err(LossError::EmptyContext);
    }
    let mut acc: Option<NodeId> = None;
    let mut total_positions = 0usize;
    for &m in maps {
        let shape = g.value(m).shape().to_vec();
        let positions = shape[0];
        total_positions += positions;
        let weight = match mode {
            MeanMode::PerLayer => 1.0 / (positions as f64 * maps.len() as f64),
            MeanMode::Flat => 1.0, // normalized after the sum
        };
        let ones = g.constant(ndarray::Array2::from_elem((1, positions), weight).into_dyn());
        let summed = g.matmul(ones, m);
        acc = Some(match acc {
            Some(prev) => g.add(prev, summed),
            None => summed,
        });
    }
    let mut mu = acc.unwrap();
    if mode == MeanMode::Flat {
        mu = g.scale(mu, 1.0 / total_positions as f64);
    }
    Ok(g.transpose(mu))
}

/// Mean squared difference between the two prompts' per-token attention
/// means over aligned context positions.
pub fn context_attention_loss(
    g: &mut Graph,
    maps_star: &[NodeId],
    maps_ref: &[NodeId],
    pairs: &[(usize, usize)],
    mode: MeanMode,
) -> Result<NodeId, LossError> {
    if maps_star.len() != maps_ref.len() {
        return Err(LossError::LayerCountMismatch { a: maps_star.len(), b: maps_ref.len() });
    }
    for (&a, &b) in maps_star.iter().zip(maps_ref.iter()) {
        let sa = g.value(a).shape().to_vec();
        let sb = g.value(b).shape().to_vec();
        if sa != sb {
            return Err(LossError::ShapeMismatch { a: sa, b: sb });
        }
    }
    if pairs.is_empty() {
        return Err(LossError::EmptyContext);
    }
    let n_tokens = g.value(maps_star[0]).shape()[1];
    for &(i, j) in pairs {
        if i >= n_tokens || j >= n_tokens {
            return Err(LossError::IndexOutOfBounds { index: i.max(j), len: n_tokens });
        }
    }

    let mu_star = token_attention_means(g, maps_star, mode)?;
    let mu_ref = token_attention_means(g, maps_ref, mode)?;
    let star_idx: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let ref_idx: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let s = g.select_rows(mu_star, &star_idx);
    let r = g.select_rows(mu_ref, &ref_idx);
    let d = g.sub(s, r);
    let sq = g.square(d);
    let total = g.sum_all(sq);
    Ok(g.scale(total, 1.0 / pairs.len() as f64))
}

/// Weighted sum of the parts; zero-weight parts contribute nothing.
pub fn combine_on_tape(
    g: &mut Graph,
    diffusion: NodeId,
    emb: Option<NodeId>,
    attn: Option<NodeId>,
    w: &LossWeights,
) -> NodeId {
    let mut total = diffusion;
    if let Some(e) = emb {
        if w.lambda_emb != 0.0 {
            let scaled = g.scale(e, w.lambda_emb);
            total = g.add(total, scaled);
        }
    }
    if let Some(a) = attn {
        if w.lambda_attn != 0.0 {
            let scaled = g.scale(a, w.lambda_attn);
            total = g.add(total, scaled);
        }
    }
    total
}

/// Value-plane combination with finiteness checks; errors name the part.
pub fn total_loss(
    diffusion: f64,
    emb: f64,
    attn: f64,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    for (part, v) in [("diffusion", diffusion), ("emb", emb), ("attn", attn)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { part, value: v });
        }
    }
    Ok(LossBreakdown {
        diffusion,
        emb,
        attn,
        total: diffusion + w.lambda_emb * emb + w.lambda_attn * attn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Side;
    use ndarray::{arr2, Array2};

    fn seq(g: &mut Graph, m: Array2<f64>) -> SeqNode {
        let real_len = m.nrows();
        SeqNode { node: g.constant(m.into_dyn()), side: Side::Output, real_len }
    }

    // ---- independent oracles ---------------------------------------------

    fn mse_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y) * (x - y);
        }
        acc / a.len() as f64
    }

    fn emb_oracle(star: &Array2<f64>, reference: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
        let mut acc = 0.0;
        for &(i, j) in pairs {
            let mut dot = 0.0;
            let mut ns = 0.0;
            let mut nr = 0.0;
            for c in 0..star.ncols() {
                dot += star[(i, c)] * reference[(j, c)];
                ns += star[(i, c)] * star[(i, c)];
                nr += reference[(j, c)] * reference[(j, c)];
            }
            acc += 1.0 - dot / (ns.sqrt() * nr.sqrt());
        }
        acc / pairs.len() as f64
    }

    fn attn_mu_oracle(maps: &[Array2<f64>], token: usize) -> f64 {
        let mut acc = 0.0;
        for m in maps {
            let mut s = 0.0;
            for p in 0..m.nrows() {
                s += m[(p, token)];
            }
            acc += s / m.nrows() as f64;
        }
        acc / maps.len() as f64
    }

    fn attn_oracle(
        star: &[Array2<f64>],
        reference: &[Array2<f64>],
        pairs: &[(usize, usize)],
    ) -> f64 {
        let mut acc = 0.0;
        for &(i, j) in pairs {
            let d = attn_mu_oracle(star, i) - attn_mu_oracle(reference, j);
            acc += d * d;
        }
        acc / pairs.len() as f64
    }

    fn random_softmax_maps(seed: u64, layers: usize, positions: usize, tokens: usize) -> Vec<Array2<f64>> {
        let mut rng = crate::rng::stream(seed, "losses.maps");
        (0..layers)
            .map(|_| {
                let raw = crate::rng::normal_array2(&mut rng, positions, tokens, 1.0);
                let mut m = raw.mapv(f64::exp);
                for mut row in m.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|x| x / s);
                }
                m
            })
            .collect()
    }

    // ---- diffusion loss -----------------------------------------------------

    #[test]
    fn diffusion_zero_when_equal() {
        let mut g = Graph::new();
        let a = g.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let l = diffusion_loss(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn diffusion_constant_offset() {
        let mut g = Graph::new();
        let t = g.constant(Array2::zeros((3, 5)).into_dyn());
        let p = g.constant(Array2::from_elem((3, 5), 2.0).into_dyn());
        let l = diffusion_loss(&mut g, t, p).unwrap();
        assert!((g.scalar(l) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn diffusion_matches_elementwise_oracle() {
        let mut rng = crate::rng::stream(3, "losses.diff");
        let a = crate::rng::normal_array2(&mut rng, 6, 7, 1.3);
        let b = crate::rng::normal_array2(&mut rng, 6, 7, 0.9);
        let mut g = Graph::new();
        let an = g.constant(a.clone().into_dyn());
        let bn = g.constant(b.clone().into_dyn());
        let l = diffusion_loss(&mut g, an, bn).unwrap();
        assert!((g.scalar(l) - mse_oracle(&a, &b)).abs() < 1e-10);
    }

    #[test]
    fn diffusion_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Array2::<f64>::zeros((2, 2)).into_dyn());
        let b = g.constant(Array2::<f64>::zeros((2, 3)).into_dyn());
        assert!(matches!(diffusion_loss(&mut g, a, b), Err(LossError::ShapeMismatch { .. })));
    }

    // ---- context embedding loss ----------------------------------------------

    #[test]
    fn emb_zero_on_identical_sequences() {
        let mut rng = crate::rng::stream(4, "losses.emb0");
        let m = crate::rng::normal_array2(&mut rng, 6, 8, 1.0);
        let mut g = Graph::new();
        let a = seq(&mut g, m.clone());
        let b = seq(&mut g, m);
        let pairs = context_pairs_excluding(6, 2..3);
        let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn emb_orthogonal_single_row_is_one() {
        let mut g = Graph::new();
        let a = seq(&mut g, arr2(&[[1.0, 0.0], [5.0, 5.0]]));
        let b = seq(&mut g, arr2(&[[0.0, 1.0], [5.0, 5.0]]));
        let l = context_embedding_loss(&mut g, a, b, &[(0, 0)]).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emb_forty_five_degrees() {
        let inv = 1.0 / 2.0_f64.sqrt();
        let mut g = Graph::new();
        let a = seq(&mut g, arr2(&[[1.0, 0.0]]));
        let b = seq(&mut g, arr2(&[[inv, inv]]));
        let l = context_embedding_loss(&mut g, a, b, &[(0, 0)]).unwrap();
        let expected = 1.0 - 2.0_f64.sqrt() / 2.0; // ~0.29289
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn emb_matches_double_loop_oracle() {
        let mut rng = crate::rng::stream(5, "losses.emb");
        for trial in 0..5 {
            let star = crate::rng::normal_array2(&mut rng, 9, 6, 1.0 + trial as f64 * 0.1);
            let reference = crate::rng::normal_array2(&mut rng, 9, 6, 0.8);
            let pairs = context_pairs_excluding(9, 3..5);
            let mut g = Graph::new();
            let a = seq(&mut g, star.clone());
            let b = seq(&mut g, reference.clone());
            let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap();
            let got = g.scalar(l);
            let want = emb_oracle(&star, &reference, &pairs);
            assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
            assert!((0.0..=2.0).contains(&got));
        }
    }

    #[test]
    fn emb_is_scale_invariant_per_row() {
        let mut rng = crate::rng::stream(6, "losses.scale");
        let star = crate::rng::normal_array2(&mut rng, 5, 4, 1.0);
        let reference = crate::rng::normal_array2(&mut rng, 5, 4, 1.0);
        let pairs = context_pairs_excluding(5, 1..2);
        let base = {
            let mut g = Graph::new();
            let a = seq(&mut g, star.clone());
            let b = seq(&mut g, reference.clone());
            let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap();
            g.scalar(l)
        };
        let mut scaled = star.clone();
        let row3 = scaled.row(3).to_owned() * 7.5;
        scaled.row_mut(3).assign(&row3);
        let after = {
            let mut g = Graph::new();
            let a = seq(&mut g, scaled);
            let b = seq(&mut g, reference);
            let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap();
            g.scalar(l)
        };
        assert!((base - after).abs() < 1e-7, "{base} vs {after}");
    }

    #[test]
    fn emb_is_symmetric() {
        let mut rng = crate::rng::stream(7, "losses.sym");
        let star = crate::rng::normal_array2(&mut rng, 5, 4, 1.0);
        let reference = crate::rng::normal_array2(&mut rng, 5, 4, 1.0);
        let pairs = context_pairs_excluding(5, 0..1);
        let ab = {
            let mut g = Graph::new();
            let a = seq(&mut g, star.clone());
            let b = seq(&mut g, reference.clone());
            { let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap(); g.scalar(l) }
        };
        let ba = {
            let mut g = Graph::new();
            let a = seq(&mut g, reference);
            let b = seq(&mut g, star);
            { let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap(); g.scalar(l) }
        };
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn emb_ignores_excluded_rows_bitwise() {
        let mut rng = crate::rng::stream(8, "losses.excl");
        let star = crate::rng::normal_array2(&mut rng, 6, 4, 1.0);
        let reference = crate::rng::normal_array2(&mut rng, 6, 4, 1.0);
        let pairs = context_pairs_excluding(6, 2..4);
        let base = {
            let mut g = Graph::new();
            let a = seq(&mut g, star.clone());
            let b = seq(&mut g, reference.clone());
            { let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap(); g.scalar(l) }
        };
        let mut star2 = star;
        star2.row_mut(2).fill(123.456);
        star2.row_mut(3).fill(-99.0);
        let mut ref2 = reference;
        ref2.row_mut(2).fill(7.7);
        let after = {
            let mut g = Graph::new();
            let a = seq(&mut g, star2);
            let b = seq(&mut g, ref2);
            { let l = context_embedding_loss(&mut g, a, b, &pairs).unwrap(); g.scalar(l) }
        };
        assert_eq!(base.to_bits(), after.to_bits(), "excluded rows must never be read");
    }

    #[test]
    fn emb_zero_norm_row_errors() {
        let mut g = Graph::new();
        let a = seq(&mut g, arr2(&[[0.0, 0.0], [1.0, 1.0]]));
        let b = seq(&mut g, arr2(&[[1.0, 0.0], [1.0, 1.0]]));
        let err = context_embedding_loss(&mut g, a, b, &[(0, 0), (1, 1)]).unwrap_err();
        assert!(matches!(err, LossError::ZeroNormRow { index: 0 }));
    }

    // ---- context attention loss ----------------------------------------------

    #[test]
    fn attn_zero_on_identical_records() {
        let maps = random_softmax_maps(9, 3, 8, 6);
        let mut g = Graph::new();
        let star: Vec<NodeId> = maps.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let reference: Vec<NodeId> =
            maps.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let pairs = context_pairs_excluding(6, 2..3);
        let l = context_attention_loss(&mut g, &star, &reference, &pairs, MeanMode::PerLayer)
            .unwrap();
        assert!(g.scalar(l).abs() < 1e-15);
    }

    #[test]
    fn attn_constant_difference() {
        // three context tokens whose means differ by 0.1 -> loss 0.01
        let star = vec![arr2(&[[0.3, 0.3, 0.3, 0.1]]), arr2(&[[0.3, 0.3, 0.3, 0.1]])];
        let reference = vec![arr2(&[[0.2, 0.2, 0.2, 0.4]]), arr2(&[[0.2, 0.2, 0.2, 0.4]])];
        let mut g = Graph::new();
        let s: Vec<NodeId> = star.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let r: Vec<NodeId> =
            reference.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let pairs = vec![(0, 0), (1, 1), (2, 2)];
        let l = context_attention_loss(&mut g, &s, &r, &pairs, MeanMode::PerLayer).unwrap();
        assert!((g.scalar(l) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn attn_matches_double_loop_oracle() {
        let star = random_softmax_maps(10, 4, 10, 7);
        let reference = random_softmax_maps(11, 4, 10, 7);
        let pairs = context_pairs_excluding(7, 3..4);
        let mut g = Graph::new();
        let s: Vec<NodeId> = star.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let r: Vec<NodeId> =
            reference.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let l = context_attention_loss(&mut g, &s, &r, &pairs, MeanMode::PerLayer).unwrap();
        let got = g.scalar(l);
        let want = attn_oracle(&star, &reference, &pairs);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got >= 0.0);
    }

    #[test]
    fn attn_layer_count_mismatch_errors() {
        let star = random_softmax_maps(12, 2, 4, 5);
        let reference = random_softmax_maps(13, 3, 4, 5);
        let mut g = Graph::new();
        let s: Vec<NodeId> = star.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let r: Vec<NodeId> =
            reference.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
        let err = context_attention_loss(&mut g, &s, &r, &[(0, 0)], MeanMode::PerLayer)
            .unwrap_err();
        assert!(matches!(err, LossError::LayerCountMismatch { a: 2, b: 3 }));
    }

    #[test]
    fn attn_ignores_excluded_token_bitwise() {
        let star = random_softmax_maps(14, 3, 6, 5);
        let reference = random_softmax_maps(15, 3, 6, 5);
        let pairs = context_pairs_excluding(5, 2..3);
        let eval = |star: &[Array2<f64>], reference: &[Array2<f64>]| {
            let mut g = Graph::new();
            let s: Vec<NodeId> =
                star.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
            let r: Vec<NodeId> =
                reference.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
            { let l = context_attention_loss(&mut g, &s, &r, &pairs, MeanMode::PerLayer).unwrap(); g.scalar(l) }
        };
        let base = eval(&star, &reference);
        // scribble over the excluded token's columns
        let mut star2 = star.clone();
        let mut ref2 = reference.clone();
        for m in star2.iter_mut().chain(ref2.iter_mut()) {
            m.column_mut(2).fill(42.0);
        }
        let after = eval(&star2, &ref2);
        assert_eq!(base.to_bits(), after.to_bits());
    }

    #[test]
    fn attn_mean_modes_agree_on_equal_resolutions() {
        let star = random_softmax_maps(16, 3, 8, 5);
        let reference = random_softmax_maps(17, 3, 8, 5);
        let pairs = context_pairs_excluding(5, 1..2);
        let eval = |mode: MeanMode| {
            let mut g = Graph::new();
            let s: Vec<NodeId> =
                star.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
            let r: Vec<NodeId> =
                reference.iter().map(|m| g.constant(m.clone().into_dyn())).collect();
            { let l = context_attention_loss(&mut g, &s, &r, &pairs, mode).unwrap(); g.scalar(l) }
        };
        let a = eval(MeanMode::PerLayer);
        let b = eval(MeanMode::Flat);
        assert!((a - b).abs() < 1e-12, "equal resolutions: modes must agree");
    }

    // ---- combination -----------------------------------------------------------

    #[test]
    fn total_reduces_to_diffusion_with_zero_weights() {
        let w = LossWeights { lambda_emb: 0.0, lambda_attn: 0.0 };
        let b = total_loss(0.7, 1.9, 2.3, &w).unwrap();
        assert_eq!(b.total, 0.7);
    }

    #[test]
    fn total_with_reference_weights() {
        let w = LossWeights { lambda_emb: 1.5e-4, lambda_attn: 0.05 };
        let b = total_loss(1.0, 2.0, 3.0, &w).unwrap();
        assert!((b.total - 1.1503).abs() < 1e-12);
    }

    #[test]
    fn total_all_zero() {
        let w = LossWeights { lambda_emb: 1.5e-4, lambda_attn: 0.05 };
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap().total, 0.0);
    }

    #[test]
    fn total_names_non_finite_part() {
        let w = LossWeights { lambda_emb: 0.1, lambda_attn: 0.1 };
        let err = total_loss(1.0, f64::NAN, 0.0, &w).unwrap_err();
        match err {
            LossError::NonFinite { part, .. } => assert_eq!(part, "emb"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn breakdown_invariant_holds() {
        let w = LossWeights { lambda_emb: 1.5e-4, lambda_attn: 0.05 };
        let b = total_loss(0.37, 1.21, 0.004, &w).unwrap();
        let recomputed = b.diffusion + w.lambda_emb * b.emb + w.lambda_attn * b.attn;
        assert!(((b.total - recomputed) / b.total.max(1e-12)).abs() < 1e-8);
    }

    #[test]
    fn combine_on_tape_skips_zero_weights_entirely() {
        // node count must not grow for zero-weight parts
        let mut g = Graph::new();
        let d = g.scalar_const(1.0);
        let e = g.scalar_const(2.0);
        let a = g.scalar_const(3.0);
        let before = g.len();
        let total = combine_on_tape(
            &mut g,
            d,
            Some(e),
            Some(a),
            &LossWeights { lambda_emb: 0.0, lambda_attn: 0.0 },
        );
        assert_eq!(g.len(), before);
        assert_eq!(total, d);
    }
}
