//! Test doubles for the pipeline's network dependencies, plus a synthetic
//! C corpus generator.
//!
//! [`MockServer`] answers `POST /v1/chat/completions` (chat-completions wire
//! shape) and `POST /embed` / `GET /health` (embedding service protocol). It
//! records every chat request body and tracks the peak number of concurrent
//! chat requests.

pub mod corpus;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

/// One scripted chat reply.
#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    /// Content wrapped in a ```C fence, with usage.
    Code(String),
    /// Raw content, with usage.
    Text(String),
    /// Raw content without a usage block.
    TextNoUsage(String),
    /// Error status with `{"error": ...}`.
    Status(u16),
}

#[derive(Debug, Clone)]
pub enum ChatBehavior {
    /// Replies consumed in order across all requests; the last one repeats.
    Script(Vec<MockReply>),
    /// Per-prompt scripts keyed by the full user message; unknown prompts
    /// get `fallback`.
    PerPrompt {
        scripts: HashMap<String, Vec<MockReply>>,
        fallback: MockReply,
    },
    /// Derives a C function from the prompt's last code snippet. Prompts whose
    /// hash falls below `malformed_percent` (mod 100) get an unbalanced body.
    Deterministic { malformed_percent: u64 },
}

#[derive(Debug, Clone)]
pub enum EmbedBehavior {
    /// Returns the first `codes.len()` vectors.
    Fixed(Vec<Vec<f64>>),
    /// Byte-histogram vectors of the given dimension.
    Histogram { dim: usize },
    /// Always fails with this status.
    Status(u16),
}

struct Shared {
    chat: ChatBehavior,
    embed: EmbedBehavior,
    delay: Duration,
    counter: AtomicUsize,
    per_prompt_counter: Mutex<HashMap<String, usize>>,
    requests: Mutex<Vec<Value>>,
    embed_requests: Mutex<Vec<Value>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

/// Running mock; shuts down when dropped.
pub struct MockServer {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

pub struct MockBuilder {
    chat: ChatBehavior,
    embed: EmbedBehavior,
    delay: Duration,
    port: u16,
}

impl MockBuilder {
    pub fn embed(mut self, embed: EmbedBehavior) -> Self {
        self.embed = embed;
        self
    }

    /// Latency added to every chat reply.
    pub fn delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn port(mut self, port: u16) -> Self {
        self.port = port;
        self
    }

    /// Starts the server on its own thread and runtime, so it works from both
    /// sync and async callers.
    pub fn start(self) -> MockServer {
        let shared = Arc::new(Shared {
            chat: self.chat,
            embed: self.embed,
            delay: self.delay,
            counter: AtomicUsize::new(0),
            per_prompt_counter: Mutex::new(HashMap::new()),
            requests: Mutex::new(Vec::new()),
            embed_requests: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        });
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(shared.clone());
        let port = self.port;
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("mock runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await.expect("bind mock");
                addr_tx.send(listener.local_addr().expect("local addr")).ok();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        shutdown_rx.await.ok();
                    })
                    .await
                    .expect("mock server");
            });
        });
        let addr = addr_rx.recv().expect("mock server failed to start");
        MockServer {
            addr,
            shared,
            shutdown: Some(shutdown_tx),
            thread: Some(thread),
        }
    }
}

impl MockServer {
    pub fn builder(chat: ChatBehavior) -> MockBuilder {
        MockBuilder {
            chat,
            embed: EmbedBehavior::Histogram { dim: 16 },
            delay: Duration::ZERO,
            port: 0,
        }
    }

    pub fn start(chat: ChatBehavior) -> Self {
        Self::builder(chat).start()
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Chat request bodies in arrival order.
    pub fn requests(&self) -> Vec<Value> {
        self.shared.requests.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.shared.requests.lock().unwrap().len()
    }

    pub fn embed_requests(&self) -> Vec<Value> {
        self.shared.embed_requests.lock().unwrap().clone()
    }

    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }

    /// User message of every chat request, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.requests()
            .iter()
            .map(|r| r["messages"][0]["content"].as_str().unwrap_or_default().to_owned())
            .collect()
    }

    /// Blocks until the server stops (used by the `mock-llm` command).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            tx.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/embed", post(embed))
        .route("/health", get(|| async { StatusCode::OK }))
        .with_state(shared)
}

struct InFlight<'a>(&'a Shared);

impl<'a> InFlight<'a> {
    fn enter(shared: &'a Shared) -> Self {
        let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        shared.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(shared)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

async fn chat(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&shared);
    shared.requests.lock().unwrap().push(body.clone());
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_owned();
    if !shared.delay.is_zero() {
        tokio::time::sleep(shared.delay).await;
    }
    let n = shared.counter.fetch_add(1, Ordering::SeqCst);
    let reply = match &shared.chat {
        ChatBehavior::Script(replies) => replies[n.min(replies.len() - 1)].clone(),
        ChatBehavior::PerPrompt { scripts, fallback } => {
            let mut counts = shared.per_prompt_counter.lock().unwrap();
            let k = counts.entry(prompt.clone()).or_default();
            let reply = scripts
                .get(&prompt)
                .map(|s| s[(*k).min(s.len() - 1)].clone())
                .unwrap_or_else(|| fallback.clone());
            *k += 1;
            reply
        }
        ChatBehavior::Deterministic { malformed_percent } => MockReply::Code(derive_function(&prompt, *malformed_percent)),
    };
    let (content, usage) = match reply {
        MockReply::Status(code) => {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            return (status, Json(json!({"error": format!("scripted failure {code}")}))).into_response();
        }
        MockReply::Code(code) => (format!("Here is the modified function:\n```C\n{code}\n```\n"), true),
        MockReply::Text(text) => (text, true),
        MockReply::TextNoUsage(text) => (text, false),
    };
    let mut resp = json!({
        "id": format!("mock-{n}"),
        "object": "chat.completion",
        "model": body["model"],
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    });
    if usage {
        resp["usage"] = json!({
            "prompt_tokens": word_count(&prompt),
            "completion_tokens": word_count(&content),
            "total_tokens": word_count(&prompt) + word_count(&content),
        });
    }
    Json(resp).into_response()
}

async fn embed(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    shared.embed_requests.lock().unwrap().push(body.clone());
    let Some(codes) = body["codes"].as_array() else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "missing codes"}))).into_response();
    };
    let codes: Vec<&str> = codes.iter().filter_map(Value::as_str).collect();
    match &shared.embed {
        EmbedBehavior::Status(code) => (
            StatusCode::from_u16(*code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(json!({"error": "scripted failure"})),
        )
            .into_response(),
        EmbedBehavior::Fixed(vectors) => {
            let dim = vectors.first().map(Vec::len).unwrap_or(0);
            let out: Vec<&Vec<f64>> = vectors.iter().take(codes.len()).collect();
            Json(json!({"vectors": out, "dim": dim})).into_response()
        }
        EmbedBehavior::Histogram { dim } => {
            let out: Vec<Vec<f64>> = codes
                .iter()
                .map(|c| {
                    let mut v = vec![0.0; *dim];
                    for b in c.bytes() {
                        v[b as usize % dim] += 1.0;
                    }
                    v
                })
                .collect();
            Json(json!({"vectors": out, "dim": dim})).into_response()
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Body of the last `Code Snippet...:` section of a prompt.
pub fn last_snippet(prompt: &str) -> &str {
    let Some(pos) = prompt.rfind("Code Snippet") else {
        return "";
    };
    let rest = &prompt[pos..];
    let rest = rest.find(':').map(|i| &rest[i + 1..]).unwrap_or(rest);
    let end = rest.find("\n\n").unwrap_or(rest.len());
    rest[..end].trim()
}

/// Deterministic pseudo-generation: renames the function in the prompt's last
/// snippet and adds a local, dropping the closing brace for the malformed share.
pub fn derive_function(prompt: &str, malformed_percent: u64) -> String {
    let h = fnv1a(prompt.as_bytes());
    let snippet = last_snippet(prompt);
    let mut code = if snippet.contains('{') {
        snippet.to_owned()
    } else {
        format!("int generated_{h:x}(void) {{\n    return 0;\n}}")
    };
    if let Some(paren) = code.find('(') {
        let name_start = code[..paren]
            .rfind(|c: char| !(c.is_alphanumeric() || c == '_'))
            .map_or(0, |i| i + 1);
        if name_start < paren {
            code.insert_str(paren, &format!("_v{}", h % 10_000));
        }
    }
    if let Some(brace) = code.find('{') {
        code.insert_str(brace + 1, &format!("\n    int aug_{:x} = {};", h % 4096, h % 97));
    }
    if h % 100 < malformed_percent {
        if let Some(last) = code.rfind('}') {
            code.truncate(last);
        }
    }
    code
}
