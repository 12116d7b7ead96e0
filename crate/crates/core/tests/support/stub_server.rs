//! In-process HTTP server speaking the inference wire protocol.
//!
//! Request bodies are decoded strictly (unknown or missing fields are
//! protocol violations and get a 422). Well-formed requests are answered
//! with the mock backend, so an HTTP client pointed at this server must
//! reproduce the mock exactly. The behavior can be switched at runtime to
//! exercise timeouts, retries and error statuses.

use std::net::TcpListener as StdListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use gps_core::backend::{FillRequest, GenRequest, LanguageModel, MockModel, ScoreRequest, TranslateRequest};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub enum Behavior {
    Normal,
    /// Answer the first `times` requests with `status`, then behave normally.
    FailFirst {
        times: usize,
        status: u16,
    },
    /// Sleep before answering normally.
    Delay(Duration),
    /// Always answer with this status and `{"error": message}`.
    Reject {
        status: u16,
        message: String,
    },
    /// Return one logprob fewer than the number of choices.
    ShortLogprobs,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireScore {
    prompt: String,
    choices: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireGenerate {
    prompt: String,
    max_tokens: u32,
    top_p: f64,
    stop: Vec<String>,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireFill {
    text: String,
    n_candidates: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTranslate {
    text: String,
    src: String,
    tgt: String,
}

struct Shared {
    behavior: Mutex<Behavior>,
    hits: AtomicUsize,
    served: AtomicUsize,
    violations: Mutex<Vec<String>>,
    auth: Mutex<Vec<Option<String>>>,
    mock: MockModel,
}

pub struct StubServer {
    pub url: String,
    shared: Arc<Shared>,
}

fn error(status: u16, message: &str) -> Response {
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, Json(json!({ "error": message }))).into_response()
}

impl Shared {
    /// Common request handling; `answer` turns a validated body into the reply.
    async fn handle<W: DeserializeOwned>(
        &self,
        endpoint: &str,
        headers: &HeaderMap,
        body: &Bytes,
        answer: impl FnOnce(W, &MockModel, bool) -> Result<Value, String>,
    ) -> Response {
        let hit = self.hits.fetch_add(1, Ordering::SeqCst);
        self.auth.lock().unwrap().push(
            headers
                .get("authorization")
                .and_then(|v| v.to_str().ok())
                .map(str::to_string),
        );
        let content_type = headers.get("content-type").and_then(|v| v.to_str().ok()).unwrap_or("");
        if !content_type.starts_with("application/json") {
            self.violations
                .lock()
                .unwrap()
                .push(format!("{endpoint}: content-type `{content_type}`"));
            return error(415, "expected application/json");
        }
        let wire: W = match serde_json::from_slice(body) {
            Ok(w) => w,
            Err(e) => {
                self.violations.lock().unwrap().push(format!("{endpoint}: {e}"));
                return error(422, &e.to_string());
            }
        };
        let behavior = self.behavior.lock().unwrap().clone();
        let short = match behavior {
            Behavior::FailFirst { times, status } if hit < times => return error(status, "transient"),
            Behavior::Reject { status, message } => return error(status, &message),
            Behavior::Delay(d) => {
                tokio::time::sleep(d).await;
                false
            }
            Behavior::ShortLogprobs => true,
            _ => false,
        };
        match answer(wire, &self.mock, short) {
            Ok(v) => {
                self.served.fetch_add(1, Ordering::SeqCst);
                Json(v).into_response()
            }
            Err(e) => error(400, &e),
        }
    }
}

async fn score(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    s.handle("/v1/score", &headers, &body, |w: WireScore, mock, short| {
        let resp = mock
            .score_choices(&ScoreRequest {
                prompt: w.prompt,
                choices: w.choices,
                context: None,
            })
            .map_err(|e| e.to_string())?;
        let mut logprobs = resp.logprobs;
        if short {
            logprobs.pop();
        }
        Ok(json!({ "logprobs": logprobs, "forward_passes": resp.forward_passes }))
    })
    .await
}

async fn generate(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    s.handle("/v1/generate", &headers, &body, |w: WireGenerate, mock, _| {
        let resp = mock
            .generate(&GenRequest {
                prompt: w.prompt,
                max_tokens: w.max_tokens,
                top_p: w.top_p,
                stop: w.stop,
                seed: w.seed,
            })
            .map_err(|e| e.to_string())?;
        Ok(json!({ "text": resp.text }))
    })
    .await
}

async fn fill(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    s.handle("/v1/fill", &headers, &body, |w: WireFill, mock, _| {
        let resp = mock
            .fill_blanks(&FillRequest {
                text_with_blanks: w.text,
                n_candidates: w.n_candidates,
            })
            .map_err(|e| e.to_string())?;
        let candidates: Vec<Value> = resp
            .candidates
            .iter()
            .rev()
            .map(|c| json!({ "fills": c.fills, "score": c.score }))
            .collect();
        Ok(json!({ "candidates": candidates }))
    })
    .await
}

async fn translate(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    s.handle("/v1/translate", &headers, &body, |w: WireTranslate, mock, _| {
        let resp = mock
            .translate(&TranslateRequest {
                text: w.text,
                src: w.src,
                tgt: w.tgt,
            })
            .map_err(|e| e.to_string())?;
        Ok(json!({ "text": resp.text }))
    })
    .await
}

impl StubServer {
    pub fn start() -> Self {
        let shared = Arc::new(Shared {
            behavior: Mutex::new(Behavior::Normal),
            hits: AtomicUsize::new(0),
            served: AtomicUsize::new(0),
            violations: Mutex::new(Vec::new()),
            auth: Mutex::new(Vec::new()),
            mock: MockModel::default(),
        });
        let listener = StdListener::bind("127.0.0.1:0").expect("bind loopback");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let app = Router::new()
            .route("/v1/score", post(score))
            .route("/v1/generate", post(generate))
            .route("/v1/fill", post(fill))
            .route("/v1/translate", post(translate))
            .with_state(shared.clone());
        thread::spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
                axum::serve(listener, app).await.expect("stub server");
            });
        });
        Self { url, shared }
    }

    /// Switch behavior and reset the hit counters.
    pub fn set(&self, behavior: Behavior) {
        *self.shared.behavior.lock().unwrap() = behavior;
        self.shared.hits.store(0, Ordering::SeqCst);
        self.shared.served.store(0, Ordering::SeqCst);
        self.shared.auth.lock().unwrap().clear();
    }

    /// Requests received since the last `set`.
    pub fn hits(&self) -> usize {
        self.shared.hits.load(Ordering::SeqCst)
    }

    /// Requests answered successfully since the last `set`.
    pub fn served(&self) -> usize {
        self.shared.served.load(Ordering::SeqCst)
    }

    pub fn violations(&self) -> Vec<String> {
        self.shared.violations.lock().unwrap().clone()
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.shared.auth.lock().unwrap().clone()
    }
}
