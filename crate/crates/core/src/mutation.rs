//! Child-prompt operators (back translation, cloze fill, sentence
//! continuation) and the candidate filter.
//!
//! Every operator works on the protected form of the parent, so slots and
//! conditional blocks travel through the model as opaque sentinels and can
//! only survive intact or be lost. Lost or duplicated sentinels, and outputs
//! whose slot set differs from the parent's, are dropped.

use std::collections::{BTreeMap, HashSet};

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    blank_marker, BackendError, FillRequest, GenRequest, LanguageModel, TranslateRequest, DEFAULT_TOP_P,
    PIVOT_LANGUAGES, SOURCE_LANGUAGE,
};
use crate::hash::SplitMix64;
use crate::scoring::ScorerKind;
use crate::task::TaskSpec;
use crate::template::{
    contains_sentinel_chars, protect, restore, validate_for_task, ProtectionMap, Template, TemplateError,
};

pub const DEFAULT_SC_META_PROMPT: &str =
    "Write two sentences that mean the same thing. Sentence 1: {parent}, Sentence 2:";
pub const DEFAULT_MASK_FRACTION: f64 = 0.15;
pub const DEFAULT_FILL_CANDIDATES: u32 = 5;
pub const DEFAULT_MAX_GEN_TOKENS: u32 = 64;
pub const DEFAULT_CHILDREN_PER_PARENT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    BackTranslation,
    Cloze,
    SentenceContinuation,
}

impl Operator {
    pub fn tag(self) -> &'static str {
        match self {
            Operator::BackTranslation => "back_translation",
            Operator::Cloze => "cloze",
            Operator::SentenceContinuation => "sentence_continuation",
        }
    }

    /// Cloze candidates are ranked by gold log-likelihood; the other two by accuracy.
    pub fn default_scorer(self) -> ScorerKind {
        match self {
            Operator::Cloze => ScorerKind::AvgLogits,
            Operator::BackTranslation | Operator::SentenceContinuation => ScorerKind::Accuracy,
        }
    }
}

fn default_languages() -> Vec<String> {
    PIVOT_LANGUAGES.iter().map(|s| s.to_string()).collect()
}
fn default_mask_fraction() -> f64 {
    DEFAULT_MASK_FRACTION
}
fn default_fill_candidates() -> u32 {
    DEFAULT_FILL_CANDIDATES
}
fn default_meta_prompt() -> String {
    DEFAULT_SC_META_PROMPT.to_string()
}
fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}
fn default_max_gen_tokens() -> u32 {
    DEFAULT_MAX_GEN_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationConfig {
    pub operator: Operator,
    #[serde(default = "default_languages")]
    pub bt_languages: Vec<String>,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "default_fill_candidates")]
    pub n_fill_candidates: u32,
    /// Must contain `{parent}`, replaced by the protected parent text.
    #[serde(default = "default_meta_prompt")]
    pub sc_meta_prompt: String,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    /// Unset means the search picks `ceil(pool_size / K)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children_per_parent: Option<usize>,
    #[serde(default = "default_max_gen_tokens")]
    pub max_gen_tokens: u32,
    #[serde(default)]
    pub seed: u64,
}

impl MutationConfig {
    pub fn new(operator: Operator) -> Self {
        Self {
            operator,
            bt_languages: default_languages(),
            mask_fraction: DEFAULT_MASK_FRACTION,
            n_fill_candidates: DEFAULT_FILL_CANDIDATES,
            sc_meta_prompt: default_meta_prompt(),
            top_p: DEFAULT_TOP_P,
            children_per_parent: None,
            max_gen_tokens: DEFAULT_MAX_GEN_TOKENS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(format!("mask_fraction {} outside (0, 1)", self.mask_fraction));
        }
        if self.n_fill_candidates == 0 {
            return Err("n_fill_candidates must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.max_gen_tokens == 0 {
            return Err("max_gen_tokens must be at least 1".into());
        }
        if self.children_per_parent == Some(0) {
            return Err("children_per_parent must be at least 1".into());
        }
        if !self.sc_meta_prompt.contains("{parent}") {
            return Err("sc_meta_prompt must contain `{parent}`".into());
        }
        if self.operator == Operator::BackTranslation && self.bt_languages.is_empty() {
            return Err("back translation needs at least one pivot language".into());
        }
        if let Some(bad) = self
            .bt_languages
            .iter()
            .find(|l| l.as_str() == SOURCE_LANGUAGE || !PIVOT_LANGUAGES.contains(&l.as_str()))
        {
            return Err(format!("unsupported pivot language `{bad}`"));
        }
        Ok(())
    }

    pub fn children(&self) -> usize {
        self.children_per_parent.unwrap_or(DEFAULT_CHILDREN_PER_PARENT)
    }
}

/// A prompt together with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub template: Template,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub operator: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

impl Candidate {
    pub fn seed(template: Template) -> Self {
        Self {
            template,
            parent_id: None,
            operator: "seed".into(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn normalized(&self) -> String {
        self.template.normalized()
    }

    pub fn id(&self) -> String {
        self.template.id()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MutationError {
    #[error("parent cannot be protected: {0}")]
    InvalidParent(TemplateError),
    #[error("no pivot language produced a valid child ({} dropped)", reasons.len())]
    AllPivotsFailed { reasons: Vec<String>, forward_passes: u64 },
    #[error("parent has no maskable word tokens")]
    NoMaskableTokens,
    #[error("backend error: {0}")]
    Backend(BackendError),
}

impl MutationError {
    /// Forward passes spent before the operator gave up.
    pub fn forward_passes(&self) -> u64 {
        match self {
            MutationError::AllPivotsFailed { forward_passes, .. } => *forward_passes,
            _ => 0,
        }
    }
}

/// Children produced for one parent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mutation {
    pub candidates: Vec<Candidate>,
    pub forward_passes: u64,
    /// Human-readable reasons for every dropped child.
    pub dropped: Vec<String>,
}

struct Child<'a> {
    parent: &'a Template,
    pmap: &'a ProtectionMap,
    operator: Operator,
}

impl Child<'_> {
    fn build(&self, text: &str, provenance: BTreeMap<String, String>) -> Result<Candidate, String> {
        let template = restore(text, self.pmap).map_err(|e| e.to_string())?;
        if template.placeholders() != self.parent.placeholders() {
            return Err("slot set changed".into());
        }
        Ok(Candidate {
            template,
            parent_id: Some(self.parent.id()),
            operator: self.operator.tag().into(),
            provenance,
        })
    }
}

fn protect_parent(parent: &Template) -> Result<(String, ProtectionMap), MutationError> {
    protect(parent).map_err(MutationError::InvalidParent)
}

/// Translate the protected parent into each pivot language and back.
pub fn mutate_back_translation(
    parent: &Template,
    backend: &dyn LanguageModel,
    cfg: &MutationConfig,
) -> Result<Mutation, MutationError> {
    let (text, pmap) = protect_parent(parent)?;
    let child = Child {
        parent,
        pmap: &pmap,
        operator: Operator::BackTranslation,
    };
    let mut out = Mutation::default();
    for lang in &cfg.bt_languages {
        let round_trip = backend
            .translate(&TranslateRequest {
                text: text.clone(),
                src: SOURCE_LANGUAGE.into(),
                tgt: lang.clone(),
            })
            .and_then(|there| {
                out.forward_passes += there.forward_passes;
                backend.translate(&TranslateRequest {
                    text: there.text,
                    src: lang.clone(),
                    tgt: SOURCE_LANGUAGE.into(),
                })
            });
        let result = match round_trip {
            Ok(back) => {
                out.forward_passes += back.forward_passes;
                child.build(&back.text, BTreeMap::from([("pivot".to_string(), lang.clone())]))
            }
            Err(e) => Err(e.to_string()),
        };
        match result {
            Ok(candidate) => out.candidates.push(candidate),
            Err(reason) => {
                debug!("back translation via {lang} dropped: {reason}");
                out.dropped.push(format!("{lang}: {reason}"));
            }
        }
    }
    if out.candidates.is_empty() {
        return Err(MutationError::AllPivotsFailed {
            reasons: out.dropped,
            forward_passes: out.forward_passes,
        });
    }
    Ok(out)
}

/// Whitespace token spans of `text`.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Token positions the cloze operator masks for a protected text:
/// `ceil(mask_fraction * n_tokens)` non-sentinel tokens (at least one),
/// drawn by a SplitMix64 shuffle seeded with `seed`, in ascending order.
pub fn cloze_mask_positions(protected: &str, mask_fraction: f64, seed: u64) -> Vec<usize> {
    let spans = token_spans(protected);
    let mut maskable: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| !contains_sentinel_chars(&protected[s..e]))
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Vec::new();
    }
    let wanted = ((mask_fraction * spans.len() as f64).ceil() as usize).clamp(1, maskable.len());
    SplitMix64::new(seed).shuffle(&mut maskable);
    maskable.truncate(wanted);
    maskable.sort_unstable();
    maskable
}

fn replace_tokens(text: &str, spans: &[(usize, usize)], positions: &[usize], words: &[String]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for (&pos, word) in positions.iter().zip(words) {
        let (s, e) = spans[pos];
        out.push_str(&text[cursor..s]);
        out.push_str(word);
        cursor = e;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Mask random word tokens of the parent and let the model fill them in.
/// Children come back ordered by fill score, best first.
pub fn mutate_cloze(
    parent: &Template,
    backend: &dyn LanguageModel,
    cfg: &MutationConfig,
) -> Result<Mutation, MutationError> {
    let (text, pmap) = protect_parent(parent)?;
    let positions = cloze_mask_positions(&text, cfg.mask_fraction, cfg.seed);
    if positions.is_empty() {
        return Err(MutationError::NoMaskableTokens);
    }
    let spans = token_spans(&text);
    let markers: Vec<String> = (0..positions.len()).map(blank_marker).collect();
    let masked = replace_tokens(&text, &spans, &positions, &markers);
    let mut resp = backend
        .fill_blanks(&FillRequest {
            text_with_blanks: masked,
            n_candidates: cfg.n_fill_candidates,
        })
        .map_err(MutationError::Backend)?;
    resp.candidates.sort_by(|a, b| b.score.total_cmp(&a.score));

    let child = Child {
        parent,
        pmap: &pmap,
        operator: Operator::Cloze,
    };
    let masked_positions = positions.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut out = Mutation {
        forward_passes: resp.forward_passes,
        ..Mutation::default()
    };
    for (rank, fill) in resp.candidates.iter().enumerate() {
        if fill.fills.len() != positions.len() {
            out.dropped.push(format!("fill {rank}: wrong number of fills"));
            continue;
        }
        let filled = replace_tokens(&text, &spans, &positions, &fill.fills);
        let provenance = BTreeMap::from([
            ("masked_positions".to_string(), masked_positions.clone()),
            ("fill_rank".to_string(), rank.to_string()),
            ("fill_score".to_string(), fill.score.to_string()),
        ]);
        match child.build(&filled, provenance) {
            Ok(candidate) => out.candidates.push(candidate),
            Err(reason) => out.dropped.push(format!("fill {rank}: {reason}")),
        }
    }
    Ok(out)
}

/// Ask a generator to restate the protected parent, one sampled child per
/// seed `cfg.seed + k`.
pub fn mutate_sentence_continuation(
    parent: &Template,
    backend: &dyn LanguageModel,
    cfg: &MutationConfig,
) -> Result<Mutation, MutationError> {
    let (text, pmap) = protect_parent(parent)?;
    let prompt = cfg.sc_meta_prompt.replace("{parent}", &text);
    let child = Child {
        parent,
        pmap: &pmap,
        operator: Operator::SentenceContinuation,
    };
    let mut out = Mutation::default();
    for k in 0..cfg.children() as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let result = backend
            .generate(&GenRequest {
                prompt: prompt.clone(),
                max_tokens: cfg.max_gen_tokens,
                top_p: cfg.top_p,
                stop: vec!["\n".into()],
                seed,
            })
            .map_err(|e| e.to_string())
            .and_then(|gen| {
                out.forward_passes += gen.forward_passes;
                let generated = gen.text.trim();
                if generated.is_empty() {
                    return Err("empty generation".to_string());
                }
                child.build(
                    generated,
                    BTreeMap::from([("sample_seed".to_string(), seed.to_string())]),
                )
            });
        match result {
            Ok(candidate) => out.candidates.push(candidate),
            Err(reason) => {
                debug!("continuation child {k} dropped: {reason}");
                out.dropped.push(format!("child {k}: {reason}"));
            }
        }
    }
    Ok(out)
}

pub fn mutate(parent: &Template, backend: &dyn LanguageModel, cfg: &MutationConfig) -> Result<Mutation, MutationError> {
    match cfg.operator {
        Operator::BackTranslation => mutate_back_translation(parent, backend, cfg),
        Operator::Cloze => mutate_cloze(parent, backend, cfg),
        Operator::SentenceContinuation => mutate_sentence_continuation(parent, backend, cfg),
    }
}

/// Drop candidates that duplicate an existing or earlier-kept prompt (after
/// whitespace normalization) or that are not valid for the task. Order is
/// preserved.
pub fn filter_candidates(cands: Vec<Candidate>, existing: &HashSet<String>, schema: &TaskSpec) -> Vec<Candidate> {
    let mut kept_texts = HashSet::new();
    cands
        .into_iter()
        .filter(|c| {
            let norm = c.normalized();
            !existing.contains(&norm) && validate_for_task(&c.template, schema) && kept_texts.insert(norm)
        })
        .collect()
}
