//! Prompt templates, regularization prompt sets and aligned prompt pairs.
//!
//! A template holds exactly one `{}` slot. Instantiating it twice — once
//! with the concept's placeholder token, once with its super-category —
//! yields an aligned pair of token-id sequences that differ only at the
//! concept slot. The pair carries the slot location and the index pairing
//! of the surrounding context tokens, which is what the regularizers
//! consume.
//!
//! Prompt-set files are UTF-8 text, one template per line. `#` starts a
//! comment line. A template line may carry optional category tags after a
//! tab: `an abstract painting of a {}\tstyle`.

use crate::backend::{BackendError, TokenId, Vocabulary};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{path}:{line}: template must contain exactly one \"{{}}\" slot (found {found})")]
    BadSlotCount { path: String, line: usize, found: usize },
    #[error("{path}:{line}: unknown category tag {tag:?}")]
    UnknownTag { path: String, line: usize, tag: String },
    #[error("{path}:{line}: duplicate template text")]
    Duplicate { path: String, line: usize },
    #[error("{path}: prompt set is empty")]
    EmptySet { path: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot sample from an empty prompt set")]
    EmptySample,
    #[error("placeholder {0:?} must tokenize to exactly one id (got {1})")]
    PlaceholderArity(String, usize),
    #[error("slot alignment failed: the two id sequences are identical")]
    AlignmentFailed,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Prompt categories; evaluation uses them for its exclusion rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Background,
    Color,
    Style,
    StyleComposition,
    Action,
    Outfit,
}

impl Tag {
    pub fn parse(s: &str) -> Option<Tag> {
        match s {
            "background" => Some(Tag::Background),
            "color" => Some(Tag::Color),
            "style" => Some(Tag::Style),
            "style_composition" => Some(Tag::StyleComposition),
            "action" => Some(Tag::Action),
            "outfit" => Some(Tag::Outfit),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Background => "background",
            Tag::Color => "color",
            Tag::Style => "style",
            Tag::StyleComposition => "style_composition",
            Tag::Action => "action",
            Tag::Outfit => "outfit",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Animate,
    Inanimate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    pub tags: BTreeSet<Tag>,
}

impl PromptTemplate {
    pub fn new(text: &str) -> Result<Self, PromptError> {
        Self::with_tags(text, BTreeSet::new())
    }

    pub fn with_tags(text: &str, tags: BTreeSet<Tag>) -> Result<Self, PromptError> {
        Self::parse_line(text, tags, "<inline>", 0)
    }

    fn parse_line(
        text: &str,
        tags: BTreeSet<Tag>,
        path: &str,
        line: usize,
    ) -> Result<Self, PromptError> {
        let found = text.matches("{}").count();
        if found != 1 {
            return Err(PromptError::BadSlotCount { path: path.into(), line, found });
        }
        // a bare "{}" stays legal: the encoder's specials always surround
        // the slot, so there is context to regularize
        Ok(Self { text: text.to_string(), tags })
    }

    /// Template text with the slot replaced by `word`.
    pub fn fill(&self, word: &str) -> String {
        self.text.replace("{}", word)
    }

    /// Context words (everything but the slot).
    pub fn context_words(&self) -> Vec<&str> {
        self.text
            .split("{}")
            .flat_map(|part| part.split_whitespace())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub templates: Vec<PromptTemplate>,
    pub audience: Audience,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Parses prompt-set text (the file format described in the module
    /// docs). `origin` names the source in errors.
    pub fn parse(content: &str, audience: Audience, origin: &str) -> Result<Self, PromptError> {
        let mut templates: Vec<PromptTemplate> = Vec::new();
        for (idx, raw) in content.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (text, tag_field) = match line.split_once('\t') {
                Some((t, tags)) => (t.trim(), Some(tags.trim())),
                None => (line, None),
            };
            let mut tags = BTreeSet::new();
            if let Some(field) = tag_field {
                for t in field.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                    let tag = Tag::parse(t).ok_or_else(|| PromptError::UnknownTag {
                        path: origin.into(),
                        line: line_no,
                        tag: t.to_string(),
                    })?;
                    tags.insert(tag);
                }
            }
            let template = PromptTemplate::parse_line(text, tags, origin, line_no)?;
            if templates.iter().any(|t| t.text == template.text) {
                return Err(PromptError::Duplicate { path: origin.into(), line: line_no });
            }
            templates.push(template);
        }
        if templates.is_empty() {
            return Err(PromptError::EmptySet { path: origin.into() });
        }
        Ok(Self { templates, audience })
    }

    /// Serializes back to the file format; `parse` of the result is the
    /// identity.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for t in &self.templates {
            out.push_str(&t.text);
            if !t.tags.is_empty() {
                out.push('\t');
                let tags: Vec<&str> = t.tags.iter().map(Tag::as_str).collect();
                out.push_str(&tags.join(","));
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_prompt_set(path: &Path, audience: Audience) -> Result<PromptSet, PromptError> {
    let content = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    PromptSet::parse(&content, audience, &path.display().to_string())
}

/// Shipped regularization prompt sets (100 templates per audience).
pub fn shipped_regularization_set(audience: Audience) -> PromptSet {
    let (content, name) = match audience {
        Audience::Animate => (
            include_str!("../data/prompts_animate.txt"),
            "builtin:prompts_animate.txt",
        ),
        Audience::Inanimate => (
            include_str!("../data/prompts_inanimate.txt"),
            "builtin:prompts_inanimate.txt",
        ),
    };
    PromptSet::parse(content, audience, name).expect("shipped prompt set must parse")
}

/// Shipped evaluation prompt lists (20 tagged templates per audience).
pub fn shipped_eval_set(audience: Audience) -> PromptSet {
    let (content, name) = match audience {
        Audience::Animate => (
            include_str!("../data/eval_prompts_animate.txt"),
            "builtin:eval_prompts_animate.txt",
        ),
        Audience::Inanimate => (
            include_str!("../data/eval_prompts_inanimate.txt"),
            "builtin:eval_prompts_inanimate.txt",
        ),
    };
    PromptSet::parse(content, audience, name).expect("shipped eval set must parse")
}

/// Uniform template draw; reproducible under a fixed-seed stream.
pub fn sample_regularization_prompt<'a, R: Rng>(
    set: &'a PromptSet,
    rng: &mut R,
) -> Result<&'a PromptTemplate, PromptError> {
    if set.templates.is_empty() {
        return Err(PromptError::EmptySample);
    }
    let idx = rng.gen_range(0..set.templates.len());
    Ok(&set.templates[idx])
}

/// The concept under personalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub placeholder_token: String,
    pub super_category: String,
    pub image_dir: PathBuf,
    pub animate: bool,
}

impl ConceptSpec {
    pub fn audience(&self) -> Audience {
        if self.animate {
            Audience::Animate
        } else {
            Audience::Inanimate
        }
    }

    /// Resolves the placeholder (exactly one id) and super-category
    /// (one id per word) against a vocabulary.
    pub fn resolve(
        &self,
        vocab: &dyn Vocabulary,
    ) -> Result<(TokenId, Vec<TokenId>), PromptError> {
        let ph = vocab.encode_word(&self.placeholder_token)?;
        if ph.len() != 1 {
            return Err(PromptError::PlaceholderArity(
                self.placeholder_token.clone(),
                ph.len(),
            ));
        }
        let mut super_ids = Vec::new();
        for word in self.super_category.split_whitespace() {
            super_ids.extend(vocab.encode_word(word)?);
        }
        if super_ids.is_empty() {
            return Err(PromptError::Backend(BackendError::UnknownWord(
                self.super_category.clone(),
            )));
        }
        Ok((ph[0], super_ids))
    }
}

/// Which positions the context regularizers range over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextExtent {
    /// Full fixed encoder sequence, padding included.
    FullSequence,
    /// Real tokens only (specials included, padding excluded).
    RealTokens,
}

/// A template instantiated for the concept and its super-category, with
/// the slot aligned between the two padded id sequences.
///
/// `slot_start` is the first index of the concept slot in both
/// sequences; the slot occupies one position in `star_ids` and
/// `ref_span` positions in `ref_ids` (more than one only for multi-word
/// super-categories). Context tokens after the slot pair up shifted by
/// `ref_span - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub template: PromptTemplate,
    pub star_ids: Vec<TokenId>,
    pub ref_ids: Vec<TokenId>,
    pub slot_start: usize,
    pub ref_span: usize,
    pub n_prompt_star: usize,
    pub n_prompt_ref: usize,
}

impl PromptPair {
    /// Slot index `k` (start of the concept span).
    pub fn k(&self) -> usize {
        self.slot_start
    }

    /// Span of the placeholder in the concept sequence.
    pub fn star_span(&self) -> std::ops::Range<usize> {
        self.slot_start..self.slot_start + 1
    }

    /// Span of the super-category ids in the reference sequence.
    pub fn ref_span_range(&self) -> std::ops::Range<usize> {
        self.slot_start..self.slot_start + self.ref_span
    }

    /// Aligned `(star_index, ref_index)` context positions under the
    /// given extent. The concept slot is excluded on both sides.
    pub fn context_pairs(&self, extent: ContextExtent) -> Vec<(usize, usize)> {
        let shift = self.ref_span - 1;
        let seq_len = self.star_ids.len();
        let star_limit = match extent {
            ContextExtent::FullSequence => seq_len - shift,
            ContextExtent::RealTokens => self.n_prompt_star,
        };
        let mut pairs = Vec::new();
        for i in 0..star_limit {
            if i < self.slot_start {
                pairs.push((i, i));
            } else if i > self.slot_start {
                pairs.push((i, i + shift));
            }
        }
        pairs
    }
}

/// Tokenizes prompt words (whitespace-separated, trailing punctuation
/// stripped, lowercased).
pub fn tokenize_words(vocab: &dyn Vocabulary, text: &str) -> Result<Vec<TokenId>, PromptError> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        let cleaned: String = word
            .trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>' && c != '{' && c != '}')
            .to_lowercase();
        if cleaned.is_empty() {
            continue;
        }
        ids.extend(vocab.encode_word(&cleaned)?);
    }
    Ok(ids)
}

/// Builds the aligned pair for one template: `bos + prefix + slot +
/// suffix + eos`, padded to `seq_len` on both sides.
pub fn instantiate_pair(
    template: &PromptTemplate,
    concept: &ConceptSpec,
    vocab: &dyn Vocabulary,
    seq_len: usize,
) -> Result<PromptPair, PromptError> {
    let (placeholder_id, super_ids) = concept.resolve(vocab)?;
    let mut parts = template.text.splitn(2, "{}");
    let prefix_text = parts.next().unwrap_or("");
    let suffix_text = parts.next().unwrap_or("");
    let prefix = tokenize_words(vocab, prefix_text)?;
    let suffix = tokenize_words(vocab, suffix_text)?;

    let build = |slot: &[TokenId]| -> Result<(Vec<TokenId>, usize), PromptError> {
        let real = 1 + prefix.len() + slot.len() + suffix.len() + 1;
        if real > seq_len {
            return Err(PromptError::Backend(BackendError::PromptTooLong {
                needed: real,
                seq_len,
            }));
        }
        let mut ids = Vec::with_capacity(seq_len);
        ids.push(vocab.bos_id());
        ids.extend_from_slice(&prefix);
        ids.extend_from_slice(slot);
        ids.extend_from_slice(&suffix);
        ids.push(vocab.eos_id());
        while ids.len() < seq_len {
            ids.push(vocab.pad_id());
        }
        Ok((ids, real))
    };

    let (star_ids, n_star) = build(&[placeholder_id])?;
    let (ref_ids, n_ref) = build(&super_ids)?;

    // locate the slot by scanning for the first divergence
    let slot_start = star_ids
        .iter()
        .zip(ref_ids.iter())
        .position(|(a, b)| a != b)
        .ok_or(PromptError::AlignmentFailed)?;
    debug_assert_eq!(slot_start, 1 + prefix.len());
    debug_assert_eq!(star_ids[slot_start], placeholder_id);

    Ok(PromptPair {
        template: template.clone(),
        star_ids,
        ref_ids,
        slot_start,
        ref_span: super_ids.len(),
        n_prompt_star: n_star,
        n_prompt_ref: n_ref,
    })
}
