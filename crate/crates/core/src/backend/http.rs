//! JSON-over-HTTP client for an inference service.
//!
//! Endpoints (all `POST`, `Content-Type: application/json`):
//!
//! ```text
//! /v1/score     {"prompt", "choices"}                           -> {"logprobs", "forward_passes"}
//! /v1/generate  {"prompt", "max_tokens", "top_p", "stop", "seed"} -> {"text"}
//! /v1/fill      {"text", "n_candidates"}                         -> {"candidates": [{"fills", "score"}]}
//! /v1/translate {"text", "src", "tgt"}                           -> {"text"}
//! ```
//!
//! Non-2xx responses carry `{"error": str}`. Every request is idempotent, so
//! timeouts, transport errors, 429 and 5xx are retried with exponential
//! backoff up to `max_retries` times.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    check_fill, check_generate, check_score, check_translate, BackendConfig, BackendError, FillRequest, FillResponse,
    GenRequest, GenResponse, LanguageModel, ScoreRequest, ScoreResponse, TranslateRequest, TranslateResponse,
    GENERATION_PASSES,
};

const BACKOFF_BASE: Duration = Duration::from_millis(50);
const BACKOFF_CAP: Duration = Duration::from_secs(2);

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.released.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.released.notify_one();
    }
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug)]
pub struct HttpModel {
    client: reqwest::blocking::Client,
    base: String,
    token: Option<String>,
    max_retries: u32,
    parallelism: usize,
    gate: Gate,
}

impl HttpModel {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| BackendError::Config("http backend needs an endpoint".into()))?;
        let token = match &cfg.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::AuthMissing(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            client,
            base: endpoint.trim_end_matches('/').to_string(),
            token,
            max_retries: cfg.max_retries,
            parallelism: cfg.request_parallelism,
            gate: Gate::new(cfg.request_parallelism),
        })
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, BackendError> {
        let _permit = self.gate.acquire();
        let mut request = self.client.post(url).json(body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if !status.is_success() {
            let message = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(BackendError::HttpStatus {
                code: status.as_u16(),
                message,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base, path);
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = BACKOFF_BASE.saturating_mul(1 << attempt.min(16)).min(BACKOFF_CAP);
                    warn!("{path} attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                    thread::sleep(delay);
                    attempt += 1;
                }
                other => {
                    debug!("{path} finished after {} attempt(s)", attempt + 1);
                    return other;
                }
            }
        }
    }
}

fn classify(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else if e.is_decode() {
        BackendError::MalformedResponse(e.to_string())
    } else {
        BackendError::Transport(e.to_string())
    }
}

impl LanguageModel for HttpModel {
    fn score_choices(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        check_score(req)?;
        let resp: ScoreResponse = self.post("/v1/score", req)?;
        if resp.logprobs.len() != req.choices.len() {
            return Err(BackendError::MalformedResponse(format!(
                "{} logprobs for {} choices",
                resp.logprobs.len(),
                req.choices.len()
            )));
        }
        if resp.forward_passes < req.choices.len() as u64 {
            return Err(BackendError::MalformedResponse(format!(
                "forward_passes {} below the number of choices",
                resp.forward_passes
            )));
        }
        Ok(resp)
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        check_generate(req)?;
        let mut resp: GenResponse = self.post("/v1/generate", req)?;
        resp.forward_passes = GENERATION_PASSES;
        Ok(resp)
    }

    fn fill_blanks(&self, req: &FillRequest) -> Result<FillResponse, BackendError> {
        let blanks = check_fill(req)?;
        let mut resp: FillResponse = self.post("/v1/fill", req)?;
        if let Some(bad) = resp.candidates.iter().find(|c| c.fills.len() != blanks) {
            return Err(BackendError::MalformedResponse(format!(
                "candidate has {} fills for {blanks} blanks",
                bad.fills.len()
            )));
        }
        resp.candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        resp.forward_passes = GENERATION_PASSES * resp.candidates.len() as u64;
        Ok(resp)
    }

    fn translate(&self, req: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
        check_translate(req)?;
        let mut resp: TranslateResponse = self.post("/v1/translate", req)?;
        resp.forward_passes = GENERATION_PASSES;
        Ok(resp)
    }

    fn parallelism(&self) -> usize {
        self.parallelism
    }
}
