//! Metric harness: text alignment and masked identity similarity.
//!
//! Text alignment scores generated images against their prompt in a
//! joint image-text feature space; identity similarity compares
//! generated images against the concept's input images in an image
//! feature space, computed on foreground-masked pixels only. Prompts
//! tagged `style` or `outfit` change the concept's appearance and are
//! excluded from the identity aggregates. Feature extractors, the
//! sample generator and the mask source are injected interfaces, so the
//! whole pipeline runs on stubs at desk scale.

use crate::prompts::{PromptSet, PromptTemplate, Tag};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty image set")]
    EmptyImageSet,
    #[error("missing masks for images: {0:?}")]
    MissingMasks(Vec<String>),
    #[error("mask for {id} has no foreground pixels")]
    EmptyForeground { id: String },
    #[error("mask shape {mask:?} does not match image {image:?} for {id}")]
    MaskShape { id: String, mask: Vec<usize>, image: Vec<usize> },
    #[error("feature length mismatch: {a} vs {b}")]
    FeatureLength { a: usize, b: usize },
    #[error("zero-norm feature vector for {0}")]
    ZeroNormFeature(String),
    #[error("scorer failed on {id}: {message}")]
    Scorer { id: String, message: String },
    #[error("generation failed for prompt {prompt:?}: {message}")]
    Generation { prompt: String, message: String },
}

/// An image (or latent standing in for one) under evaluation.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub id: String,
    /// Height x width x channels.
    pub pixels: Array3<f64>,
}

/// Foreground mask; nonzero marks foreground.
#[derive(Debug, Clone)]
pub struct Mask {
    pub pixels: Array2<u8>,
}

impl Mask {
    pub fn full(height: usize, width: usize) -> Self {
        Self { pixels: Array2::from_elem((height, width), 255) }
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }
}

/// Zeroes background pixels.
pub fn apply_mask(image: &EvalImage, mask: &Mask) -> Result<EvalImage, EvalError> {
    let (h, w, c) = image.pixels.dim();
    if mask.pixels.dim() != (h, w) {
        return Err(EvalError::MaskShape {
            id: image.id.clone(),
            mask: mask.pixels.shape().to_vec(),
            image: image.pixels.shape().to_vec(),
        });
    }
    if mask.foreground_count() == 0 {
        return Err(EvalError::EmptyForeground { id: image.id.clone() });
    }
    let mut out = image.pixels.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.pixels[(y, x)] == 0 {
                for ch in 0..c {
                    out[(y, x, ch)] = 0.0;
                }
            }
        }
    }
    Ok(EvalImage { id: image.id.clone(), pixels: out })
}

/// Joint image-text feature space (the text-alignment scorer).
pub trait TextImageScorer {
    fn image_feature(&self, image: &EvalImage) -> Result<Vec<f64>, EvalError>;
    fn text_feature(&self, text: &str) -> Result<Vec<f64>, EvalError>;
}

/// Image-only feature space (identity similarity).
pub trait ImageFeaturizer {
    fn feature(&self, image: &EvalImage) -> Result<Vec<f64>, EvalError>;
}

/// Produces foreground masks for evaluated images.
pub trait MaskProvider {
    fn mask_for(&self, image: &EvalImage) -> Result<Mask, EvalError>;
}

/// Treats every pixel as foreground.
pub struct FullForegroundMasks;

impl MaskProvider for FullForegroundMasks {
    fn mask_for(&self, image: &EvalImage) -> Result<Mask, EvalError> {
        let (h, w, _) = image.pixels.dim();
        Ok(Mask::full(h, w))
    }
}

/// Generates samples for one evaluation prompt.
pub trait SampleGenerator {
    fn generate(
        &self,
        template: &PromptTemplate,
        n: usize,
        seed: u64,
    ) -> Result<Vec<EvalImage>, EvalError>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::FeatureLength { a: a.len(), b: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(EvalError::ZeroNormFeature("cosine".into()));
    }
    Ok(dot / (na * nb))
}

/// Mean image-text similarity of a generated set against one prompt.
/// The caller substitutes the concept slot before scoring (a raw
/// placeholder means nothing to a generic scorer).
pub fn clip_t(
    images: &[EvalImage],
    prompt_text: &str,
    scorer: &dyn TextImageScorer,
) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let text_feat = scorer.text_feature(prompt_text)?;
    let mut acc = 0.0;
    for img in images {
        let feat = scorer.image_feature(img).map_err(|e| EvalError::Scorer {
            id: img.id.clone(),
            message: e.to_string(),
        })?;
        acc += cosine(&feat, &text_feat)?;
    }
    Ok(acc / images.len() as f64)
}

/// Mean pairwise similarity between masked generated and masked
/// reference images in the featurizer's space (all generated x reference
/// pairs).
pub fn masked_identity(
    generated: &[EvalImage],
    references: &[EvalImage],
    masks_generated: &[Mask],
    masks_references: &[Mask],
    featurizer: &dyn ImageFeaturizer,
) -> Result<f64, EvalError> {
    if generated.is_empty() || references.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let missing: Vec<String> = generated
        .iter()
        .enumerate()
        .filter(|(i, _)| *i >= masks_generated.len())
        .map(|(_, img)| img.id.clone())
        .chain(
            references
                .iter()
                .enumerate()
                .filter(|(i, _)| *i >= masks_references.len())
                .map(|(_, img)| img.id.clone()),
        )
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingMasks(missing));
    }

    let gen_feats: Vec<Vec<f64>> = generated
        .iter()
        .zip(masks_generated)
        .map(|(img, mask)| featurizer.feature(&apply_mask(img, mask)?))
        .collect::<Result<_, _>>()?;
    let ref_feats: Vec<Vec<f64>> = references
        .iter()
        .zip(masks_references)
        .map(|(img, mask)| featurizer.feature(&apply_mask(img, mask)?))
        .collect::<Result<_, _>>()?;

    let mut acc = 0.0;
    for gf in &gen_feats {
        for rf in &ref_feats {
            acc += cosine(gf, rf)?;
        }
    }
    Ok(acc / (gen_feats.len() * ref_feats.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub prompts: PromptSet,
    pub samples_per_prompt: usize,
    /// Tags excluded from the identity aggregates.
    pub exclusions: BTreeSet<Tag>,
    pub seed: u64,
}

impl MetricConfig {
    pub fn defaults(prompts: PromptSet, seed: u64) -> Self {
        let mut exclusions = BTreeSet::new();
        exclusions.insert(Tag::Style);
        exclusions.insert(Tag::StyleComposition);
        exclusions.insert(Tag::Outfit);
        Self { prompts, samples_per_prompt: 32, exclusions, seed }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub prompt: String,
    pub tags: Vec<String>,
    pub clip_t: Option<f64>,
    pub clip_i: Option<f64>,
    pub dino: Option<f64>,
    pub identity_included: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_t: Option<f64>,
    pub clip_i: Option<f64>,
    pub dino: Option<f64>,
    pub per_prompt: Vec<PromptMetrics>,
}

impl MetricReport {
    /// Plain-text table mirroring the per-prompt breakdown.
    pub fn render_table(&self) -> String {
        fn fmt(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<52} {:>8} {:>8} {:>8}\n",
            "prompt", "CLIP-T", "CLIP-I", "DINO"
        ));
        for row in &self.per_prompt {
            let mut label = row.prompt.clone();
            if label.len() > 50 {
                label.truncate(47);
                label.push_str("...");
            }
            if let Some(err) = &row.error {
                out.push_str(&format!("{label:<52} failed: {err}\n"));
            } else {
                out.push_str(&format!(
                    "{:<52} {:>8} {:>8} {:>8}\n",
                    label,
                    fmt(row.clip_t),
                    fmt(row.clip_i),
                    fmt(row.dino)
                ));
            }
        }
        out.push_str(&format!(
            "{:<52} {:>8} {:>8} {:>8}\n",
            "aggregate",
            fmt(self.clip_t),
            fmt(self.clip_i),
            fmt(self.dino)
        ));
        out
    }
}

/// Featurizer pair for the two identity spaces.
pub struct IdentityFeaturizers<'a> {
    pub clip_image: &'a dyn ImageFeaturizer,
    pub dino: &'a dyn ImageFeaturizer,
}

/// Runs the full metric protocol over the configured prompt list.
///
/// Text alignment is scored for every prompt, with the concept slot
/// filled by the super-category word. Identity metrics run only for
/// prompts whose tags avoid the exclusion set. A failed generation
/// marks the prompt in the report and removes it from every aggregate.
pub fn evaluate_concept(
    generator: &dyn SampleGenerator,
    references: &[EvalImage],
    super_category: &str,
    cfg: &MetricConfig,
    scorer: &dyn TextImageScorer,
    featurizers: &IdentityFeaturizers<'_>,
    masks: &dyn MaskProvider,
) -> Result<MetricReport, EvalError> {
    if references.is_empty() {
        return Err(EvalError::EmptyImageSet);
    }
    let ref_masks: Vec<Mask> =
        references.iter().map(|img| masks.mask_for(img)).collect::<Result<_, _>>()?;

    let mut per_prompt = Vec::new();
    for (idx, template) in cfg.prompts.templates.iter().enumerate() {
        let tags: Vec<String> = template.tags.iter().map(|t| t.to_string()).collect();
        let identity_included = template.tags.is_disjoint(&cfg.exclusions);
        let seed = cfg.seed.wrapping_add(idx as u64);

        let generated = match generator.generate(template, cfg.samples_per_prompt, seed) {
            Ok(images) if !images.is_empty() => images,
            Ok(_) => {
                per_prompt.push(PromptMetrics {
                    prompt: template.text.clone(),
                    tags,
                    clip_t: None,
                    clip_i: None,
                    dino: None,
                    identity_included: false,
                    error: Some("generator returned no samples".into()),
                });
                continue;
            }
            Err(e) => {
                per_prompt.push(PromptMetrics {
                    prompt: template.text.clone(),
                    tags,
                    clip_t: None,
                    clip_i: None,
                    dino: None,
                    identity_included: false,
                    error: Some(e.to_string()),
                });
                continue;
            }
        };

        let scored_text = template.fill(super_category);
        let clip_t_val = clip_t(&generated, &scored_text, scorer)?;

        let (clip_i_val, dino_val) = if identity_included {
            let gen_masks: Vec<Mask> =
                generated.iter().map(|img| masks.mask_for(img)).collect::<Result<_, _>>()?;
            let ci = masked_identity(
                &generated,
                references,
                &gen_masks,
                &ref_masks,
                featurizers.clip_image,
            )?;
            let di = masked_identity(
                &generated,
                references,
                &gen_masks,
                &ref_masks,
                featurizers.dino,
            )?;
            (Some(ci), Some(di))
        } else {
            (None, None)
        };

        per_prompt.push(PromptMetrics {
            prompt: template.text.clone(),
            tags,
            clip_t: Some(clip_t_val),
            clip_i: clip_i_val,
            dino: dino_val,
            identity_included,
            error: None,
        });
    }

    let mean_of = |vals: Vec<f64>| {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let clip_t_agg = mean_of(per_prompt.iter().filter_map(|r| r.clip_t).collect());
    let clip_i_agg = mean_of(per_prompt.iter().filter_map(|r| r.clip_i).collect());
    let dino_agg = mean_of(per_prompt.iter().filter_map(|r| r.dino).collect());

    Ok(MetricReport {
        clip_t: clip_t_agg,
        clip_i: clip_i_agg,
        dino: dino_agg,
        per_prompt,
    })
}

/// Deterministic stand-in featurizer: the flattened masked pixels.
/// Meaningful only for plumbing checks, which is all the desk-scale
/// backend can support.
pub struct FlattenFeaturizer;

impl ImageFeaturizer for FlattenFeaturizer {
    fn feature(&self, image: &EvalImage) -> Result<Vec<f64>, EvalError> {
        Ok(image.pixels.iter().cloned().collect())
    }
}

/// Stand-in featurizer with a different view than [`FlattenFeaturizer`]:
/// per-pixel mean over channels.
pub struct ChannelMeanFeaturizer;

impl ImageFeaturizer for ChannelMeanFeaturizer {
    fn feature(&self, image: &EvalImage) -> Result<Vec<f64>, EvalError> {
        let (h, w, c) = image.pixels.dim();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += image.pixels[(y, x, ch)];
                }
                out.push(acc / c as f64);
            }
        }
        Ok(out)
    }
}

/// Masks read from `<dir>/<image id>.png`, 8-bit single channel.
pub struct FileMaskProvider {
    pub dir: std::path::PathBuf,
}

impl MaskProvider for FileMaskProvider {
    fn mask_for(&self, image: &EvalImage) -> Result<Mask, EvalError> {
        let path = self.dir.join(format!("{}.png", image.id));
        let img = image::open(&path).map_err(|e| EvalError::MissingMasks(vec![format!(
            "{} ({e})",
            path.display()
        )]))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let mut pixels = Array2::zeros((h as usize, w as usize));
        for (x, y, p) in gray.enumerate_pixels() {
            pixels[(y as usize, x as usize)] = p.0[0];
        }
        Ok(Mask { pixels })
    }
}

/// Deterministic stand-in scorer: flattened pixels for images, a hashed
/// bag-of-words unit vector for text.
pub struct HashScorer {
    pub feature_len: usize,
}

impl TextImageScorer for HashScorer {
    fn image_feature(&self, image: &EvalImage) -> Result<Vec<f64>, EvalError> {
        let flat: Vec<f64> = image.pixels.iter().cloned().collect();
        let mut out = vec![0.0; self.feature_len];
        for (i, v) in flat.iter().enumerate() {
            out[i % self.feature_len] += v;
        }
        Ok(out)
    }

    fn text_feature(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.feature_len];
        for word in text.split_whitespace() {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in word.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            out[(h % self.feature_len as u64) as usize] += 1.0;
        }
        if out.iter().all(|&x| x == 0.0) {
            return Err(EvalError::ZeroNormFeature(text.to_string()));
        }
        Ok(out)
    }
}
