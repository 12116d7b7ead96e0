//! Black-box language model capabilities: choice scoring, free generation,
//! blank filling and translation.
//!
//! Three implementations share the [`LanguageModel`] trait:
//!
//! * [`HttpModel`] speaks the JSON protocol of an inference service.
//! * [`MockModel`] is a deterministic, hash-driven stand-in.
//! * [`OracleModel`] scores prompts by their word-level similarity to a hidden
//!   target template, giving a synthetic landscape with a known optimum.

mod http;
mod mock;
mod oracle;
pub mod words;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpModel;
pub use mock::{blank_marker, count_blanks, paraphrase, MockModel};
pub use oracle::{levenshtein, OracleModel};

/// Back-translation pivot languages.
pub const PIVOT_LANGUAGES: [&str; 11] = ["zh", "ja", "ko", "fr", "es", "it", "ru", "de", "ar", "el", "yue"];

pub const SOURCE_LANGUAGE: &str = "en";

pub const DEFAULT_TOP_P: f64 = 0.9;

/// Forward passes charged for each produced generation, fill or translation.
pub const GENERATION_PASSES: u64 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {code}: {message}")]
    HttpStatus { code: u16, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("environment variable `{0}` with the bearer token is not set")]
    AuthMissing(String),
    #[error("unsupported language pair {src} -> {tgt}")]
    UnsupportedLanguage { src: String, tgt: String },
    #[error("text contains no blank markers")]
    NoBlanks,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl BackendError {
    /// Transport-level failures that a retry may clear.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::HttpStatus { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

/// Extra information about a scoring call. Never sent over the wire; only
/// the oracle backend reads it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreContext {
    pub template: String,
    pub example_index: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub choices: Vec<String>,
    #[serde(skip)]
    pub context: Option<ScoreContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    /// Total log-likelihood of each choice, in nats.
    pub logprobs: Vec<f64>,
    pub forward_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub top_p: f64,
    pub stop: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    #[serde(skip)]
    pub forward_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillRequest {
    /// Text with blank markers `<X>`, `<Y>`, ... in order.
    #[serde(rename = "text")]
    pub text_with_blanks: String,
    pub n_candidates: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillCandidate {
    pub fills: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillResponse {
    pub candidates: Vec<FillCandidate>,
    #[serde(skip)]
    pub forward_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateRequest {
    pub text: String,
    pub src: String,
    pub tgt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub text: String,
    #[serde(skip)]
    pub forward_passes: u64,
}

/// A frozen language model seen only through its inputs and outputs.
pub trait LanguageModel: Send + Sync {
    fn score_choices(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError>;
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError>;
    fn fill_blanks(&self, req: &FillRequest) -> Result<FillResponse, BackendError>;
    fn translate(&self, req: &TranslateRequest) -> Result<TranslateResponse, BackendError>;

    /// How many requests the backend accepts at once.
    fn parallelism(&self) -> usize {
        1
    }
}

pub(crate) fn check_score(req: &ScoreRequest) -> Result<(), BackendError> {
    if req.prompt.is_empty() {
        return Err(BackendError::InvalidRequest("empty prompt".into()));
    }
    if req.choices.is_empty() {
        return Err(BackendError::InvalidRequest("no answer choices".into()));
    }
    Ok(())
}

pub(crate) fn check_generate(req: &GenRequest) -> Result<(), BackendError> {
    if req.max_tokens == 0 {
        return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
    }
    if !(req.top_p > 0.0 && req.top_p <= 1.0) {
        return Err(BackendError::InvalidRequest(format!(
            "top_p {} outside (0, 1]",
            req.top_p
        )));
    }
    Ok(())
}

pub(crate) fn check_fill(req: &FillRequest) -> Result<usize, BackendError> {
    if req.n_candidates == 0 {
        return Err(BackendError::InvalidRequest("n_candidates must be at least 1".into()));
    }
    match count_blanks(&req.text_with_blanks) {
        0 => Err(BackendError::NoBlanks),
        n => Ok(n),
    }
}

pub fn is_supported_language(code: &str) -> bool {
    code == SOURCE_LANGUAGE || PIVOT_LANGUAGES.contains(&code)
}

pub(crate) fn check_translate(req: &TranslateRequest) -> Result<(), BackendError> {
    if req.src == req.tgt || !is_supported_language(&req.src) || !is_supported_language(&req.tgt) {
        return Err(BackendError::UnsupportedLanguage {
            src: req.src.clone(),
            tgt: req.tgt.clone(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
    Oracle,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_parallelism")]
    pub request_parallelism: usize,
    /// Hidden target template of the oracle landscape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_target: Option<String>,
}

impl BackendConfig {
    pub fn of_kind(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            auth_env: None,
            request_parallelism: default_parallelism(),
            hidden_target: None,
        }
    }

    pub fn mock() -> Self {
        Self::of_kind(BackendKind::Mock)
    }

    pub fn oracle(hidden_target: impl Into<String>) -> Self {
        Self {
            hidden_target: Some(hidden_target.into()),
            ..Self::of_kind(BackendKind::Oracle)
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: Some(endpoint.into()),
            ..Self::of_kind(BackendKind::Http)
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("timeout_ms must be positive".into()));
        }
        if self.request_parallelism == 0 {
            return Err(BackendError::Config("request_parallelism must be at least 1".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => {
                Err(BackendError::Config("http backend needs an endpoint".into()))
            }
            BackendKind::Oracle if self.hidden_target.is_none() => {
                Err(BackendError::Config("oracle backend needs a hidden_target".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn LanguageModel>, BackendError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Arc::new(MockModel::new(self.request_parallelism)),
            BackendKind::Oracle => {
                let target = self.hidden_target.as_deref().unwrap_or_default();
                Arc::new(OracleModel::new(target, self.request_parallelism)?)
            }
            BackendKind::Http => Arc::new(HttpModel::from_config(self)?),
        })
    }
}
