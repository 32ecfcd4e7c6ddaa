//! LLM generation over a chat-completions endpoint.
//!
//! Each prompt goes out as a single user message. A response without a
//! fenced code block, a transport failure or a 5xx counts as a failed
//! attempt; a prompt gets at most `max_attempts` attempts (3 by default),
//! after which its record carries the failure and the batch moves on.
//! Authentication and quota errors (any other 4xx) abort the batch.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::fnv1a64;
use crate::formulator::PromptInstance;
use crate::rng::SplitMix64;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 4096;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pricing {
    /// USD per 1K prompt tokens.
    pub input_per_1k: f64,
    /// USD per 1K completion tokens.
    pub output_per_1k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub model: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub max_attempts: u32,
    pub concurrency: usize,
    pub endpoint: String,
    pub api_key: Option<String>,
    pub pricing: Pricing,
    /// First retry delay; doubles per attempt, scaled by a jitter in [0.5, 1.5).
    pub backoff_base: Duration,
    pub request_timeout: Duration,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            concurrency: 1,
            endpoint: "https://api.openai.com".into(),
            api_key: None,
            pricing: Pricing::default(),
            backoff_base: Duration::from_secs(1),
            request_timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("max_attempts must be in 1..=3, got {0}")]
    Attempts(u32),
    #[error("concurrency must be positive")]
    Concurrency,
    #[error("temperature must be finite and non-negative")]
    Temperature,
    #[error("endpoint is empty")]
    Endpoint,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=DEFAULT_MAX_ATTEMPTS).contains(&self.max_attempts) {
            return Err(ConfigError::Attempts(self.max_attempts));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Concurrency);
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ConfigError::Temperature);
        }
        if self.endpoint.trim().is_empty() {
            return Err(ConfigError::Endpoint);
        }
        Ok(())
    }

    fn backoff(&self, prompt_id: &str, failed_attempt: u32) -> Duration {
        if self.backoff_base.is_zero() {
            return Duration::ZERO;
        }
        let mut rng = SplitMix64::new(fnv1a64(prompt_id.as_bytes()) ^ u64::from(failed_attempt));
        let jitter = 0.5 + rng.next_f64();
        self.backoff_base.mul_f64(2f64.powi(failed_attempt as i32 - 1) * jitter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Ok,
    NoCode,
    ApiError,
    /// Not sent because the batch aborted first; never journaled.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_code: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub status: GenerationStatus,
}

impl GenerationRecord {
    fn skipped(prompt_id: &str) -> Self {
        Self {
            prompt_id: prompt_id.to_owned(),
            attempts: 0,
            raw_response: None,
            extracted_code: None,
            input_tokens: 0,
            output_tokens: 0,
            status: GenerationStatus::Skipped,
        }
    }
}

/// Body of the first triple-backtick fence, without its language tag and
/// surrounding newlines. An unclosed fence runs to the end of the text.
pub fn extract_code_block(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // The language tag is whatever follows the fence on the same line.
    let tag_end = after.find('\n');
    let body_start = match tag_end {
        Some(i) if after[..i].trim().chars().all(|c| c.is_ascii_alphanumeric() || "+#-_".contains(c)) => i + 1,
        // `C ```` or ```int f(){}``` on one line: treat a leading word as a tag only
        // when something else follows it.
        _ => {
            let word_len = after
                .find(|c: char| !(c.is_ascii_alphanumeric() || "+#-_".contains(c)))
                .unwrap_or(after.len());
            if is_language_tag(&after[..word_len]) {
                word_len
            } else {
                0
            }
        }
    };
    let body = &after[body_start..];
    let body = match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    };
    let body = body.trim_matches(|c| c == '\n' || c == '\r');
    (!body.trim().is_empty()).then(|| body.to_owned())
}

fn is_language_tag(word: &str) -> bool {
    matches!(word.to_ascii_lowercase().as_str(), "c" | "cpp" | "c++" | "h" | "cc" | "cxx")
}

/// Whitespace-separated word count; the token estimate when the endpoint
/// reports no usage.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub content: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EndpointError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    /// Authentication, quota and other client errors; not retried.
    #[error("request rejected with {status}: {body}")]
    Fatal { status: u16, body: String },
}

impl EndpointError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, EndpointError::Fatal { .. })
    }
}

/// Something that answers one chat prompt.
pub trait ChatEndpoint: Sync {
    fn complete(&self, prompt: &str, cfg: &GenerationConfig) -> impl Future<Output = Result<ChatReply, EndpointError>> + Send;
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

/// HTTP client for `POST <endpoint>/v1/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    client: reqwest::Client,
    url: String,
}

impl HttpChatClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, EndpointError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/v1/chat/completions", endpoint.trim_end_matches('/')),
        })
    }

    pub fn from_config(cfg: &GenerationConfig) -> Result<Self, EndpointError> {
        Self::new(&cfg.endpoint, cfg.request_timeout)
    }
}

impl ChatEndpoint for HttpChatClient {
    async fn complete(&self, prompt: &str, cfg: &GenerationConfig) -> Result<ChatReply, EndpointError> {
        let body = ChatRequest {
            model: &cfg.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: cfg.temperature,
            max_tokens: cfg.max_new_tokens,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| EndpointError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| EndpointError::Transport(e.to_string()))?;
        if status.is_server_error() || status == reqwest::StatusCode::REQUEST_TIMEOUT {
            return Err(EndpointError::Server {
                status: status.as_u16(),
                body: text,
            });
        }
        if !status.is_success() {
            return Err(EndpointError::Fatal {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| EndpointError::Malformed(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| EndpointError::Malformed("no choices[0].message.content".into()))?;
        Ok(ChatReply {
            content,
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

/// Sends one prompt with the retry contract. Only fatal endpoint errors
/// escape; every other outcome is a record.
pub async fn generate_one<E: ChatEndpoint>(
    client: &E,
    prompt: &PromptInstance,
    cfg: &GenerationConfig,
) -> Result<GenerationRecord, EndpointError> {
    let mut record = GenerationRecord {
        prompt_id: prompt.id.clone(),
        attempts: 0,
        raw_response: None,
        extracted_code: None,
        input_tokens: 0,
        output_tokens: 0,
        status: GenerationStatus::ApiError,
    };
    for attempt in 1..=cfg.max_attempts.min(DEFAULT_MAX_ATTEMPTS) {
        record.attempts = attempt;
        match client.complete(&prompt.text, cfg).await {
            Ok(reply) => {
                record.input_tokens += reply.prompt_tokens.unwrap_or_else(|| whitespace_tokens(&prompt.text));
                record.output_tokens += reply.completion_tokens.unwrap_or_else(|| whitespace_tokens(&reply.content));
                let code = extract_code_block(&reply.content);
                record.raw_response = Some(reply.content);
                if let Some(code) = code {
                    record.extracted_code = Some(code);
                    record.status = GenerationStatus::Ok;
                    return Ok(record);
                }
                record.status = GenerationStatus::NoCode;
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                tracing::warn!(prompt = %prompt.id, attempt, error = %e, "generation attempt failed");
                record.status = GenerationStatus::ApiError;
            }
        }
        if attempt < cfg.max_attempts {
            let delay = cfg.backoff(&prompt.id, attempt);
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
        }
    }
    Ok(record)
}

/// Append-only JSONL log of finished records, keyed by prompt id.
#[derive(Debug)]
pub struct Journal {
    file: Mutex<File>,
    done: HashMap<String, GenerationRecord>,
}

impl Journal {
    /// Opens or creates the journal. A torn final line from an interrupted
    /// write is ignored.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut done = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                match serde_json::from_str::<GenerationRecord>(&line) {
                    Ok(rec) if rec.status != GenerationStatus::Skipped => {
                        done.insert(rec.prompt_id.clone(), rec);
                    }
                    Ok(_) => {}
                    Err(e) => tracing::warn!(error = %e, "ignoring unreadable journal line"),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        // Terminate a torn line so the next append starts cleanly.
        if file.metadata()?.len() > 0 && !ends_with_newline(path)? {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            file: Mutex::new(file),
            done,
        })
    }

    pub fn completed(&self, prompt_id: &str) -> Option<&GenerationRecord> {
        self.done.get(prompt_id)
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    fn append(&self, record: &GenerationRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock().expect("journal lock poisoned");
        file.write_all(&line)?;
        file.flush()
    }
}

fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    let bytes = std::fs::read(path)?;
    Ok(bytes.last() == Some(&b'\n'))
}

#[derive(Debug)]
pub struct BatchOutcome {
    /// Index-aligned with the input prompts.
    pub records: Vec<GenerationRecord>,
    /// Records taken from the journal instead of being regenerated.
    pub resumed: usize,
    /// Set when a fatal endpoint error stopped the batch; unsent prompts are `Skipped`.
    pub fatal: Option<EndpointError>,
}

/// Generates every prompt with at most `cfg.concurrency` requests in flight.
/// With a journal, prompts already recorded there are not sent again.
pub async fn run_batch<E: ChatEndpoint>(
    client: &E,
    prompts: &[PromptInstance],
    cfg: &GenerationConfig,
    journal: Option<&Journal>,
) -> BatchOutcome {
    use futures::stream::{self, StreamExt};

    let abort = AtomicBool::new(false);
    let fatal: Mutex<Option<EndpointError>> = Mutex::new(None);
    let mut records: Vec<Option<GenerationRecord>> = vec![None; prompts.len()];
    let mut resumed = 0;
    let mut pending = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        match journal.and_then(|j| j.completed(&p.id)) {
            Some(rec) => {
                records[i] = Some(rec.clone());
                resumed += 1;
            }
            None => pending.push(i),
        }
    }

    let results: Vec<(usize, GenerationRecord)> = stream::iter(pending)
        .map(|i| {
            let abort = &abort;
            let fatal = &fatal;
            async move {
                let prompt = &prompts[i];
                if abort.load(Ordering::SeqCst) {
                    return (i, GenerationRecord::skipped(&prompt.id));
                }
                match generate_one(client, prompt, cfg).await {
                    Ok(rec) => {
                        if let Some(j) = journal {
                            if let Err(e) = j.append(&rec) {
                                tracing::error!(error = %e, "failed to append to journal");
                            }
                        }
                        (i, rec)
                    }
                    Err(e) => {
                        tracing::error!(prompt = %prompt.id, error = %e, "fatal endpoint error, aborting batch");
                        abort.store(true, Ordering::SeqCst);
                        fatal.lock().unwrap().get_or_insert(e);
                        (i, GenerationRecord::skipped(&prompt.id))
                    }
                }
            }
        })
        .buffer_unordered(cfg.concurrency.max(1))
        .collect()
        .await;

    for (i, rec) in results {
        records[i] = Some(rec);
    }
    BatchOutcome {
        records: records.into_iter().map(|r| r.expect("every prompt has a record")).collect(),
        resumed,
        fatal: fatal.into_inner().unwrap(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    pub total_usd: f64,
    /// `None` when no record succeeded.
    pub per_1k_samples_usd: Option<f64>,
    pub ok_records: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

pub fn estimate_cost(records: &[GenerationRecord], pricing: &Pricing) -> CostReport {
    let input_tokens: u64 = records.iter().map(|r| r.input_tokens).sum();
    let output_tokens: u64 = records.iter().map(|r| r.output_tokens).sum();
    let total_usd = (input_tokens as f64 * pricing.input_per_1k + output_tokens as f64 * pricing.output_per_1k) / 1000.0;
    let ok_records = records.iter().filter(|r| r.status == GenerationStatus::Ok).count();
    CostReport {
        total_usd,
        per_1k_samples_usd: (ok_records > 0).then(|| total_usd * 1000.0 / ok_records as f64),
        ok_records,
        input_tokens,
        output_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fence_grammar() {
        assert_eq!(extract_code_block("```C\nint f(){return 0;}\n```").as_deref(), Some("int f(){return 0;}"));
        assert_eq!(extract_code_block("no code here"), None);
        assert_eq!(extract_code_block("```c\nA\n```\ntext\n```c\nB\n```").as_deref(), Some("A"));
        assert_eq!(extract_code_block("```\nint g;\n```").as_deref(), Some("int g;"));
        assert_eq!(extract_code_block("```cpp\nint h;\n```").as_deref(), Some("int h;"));
        assert_eq!(extract_code_block("```C\n\n```"), None);
        assert_eq!(extract_code_block("```C int x; ```").as_deref(), Some(" int x; "));
        assert_eq!(extract_code_block("x ```int y;```").as_deref(), Some("int y;"));
        assert_eq!(extract_code_block("```C\nint z;\n").as_deref(), Some("int z;"));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = GenerationConfig::default();
        assert_eq!((cfg.temperature, cfg.max_new_tokens, cfg.max_attempts), (0.5, 4096, 3));
        assert!(cfg.validate().is_ok());
        assert_eq!(GenerationConfig { max_attempts: 4, ..cfg.clone() }.validate(), Err(ConfigError::Attempts(4)));
        assert_eq!(GenerationConfig { concurrency: 0, ..cfg }.validate(), Err(ConfigError::Concurrency));
    }

    #[test]
    fn backoff_doubles_with_jitter() {
        let cfg = GenerationConfig::default();
        let first = cfg.backoff("p", 1).as_secs_f64();
        let second = cfg.backoff("p", 2).as_secs_f64();
        assert!((0.5..1.5).contains(&first));
        assert!((1.0..3.0).contains(&second));
        assert_eq!(cfg.backoff("p", 2), cfg.backoff("p", 2));
    }

    fn rec(status: GenerationStatus, input: u64, output: u64) -> GenerationRecord {
        GenerationRecord {
            prompt_id: "p".into(),
            attempts: 1,
            raw_response: None,
            extracted_code: None,
            input_tokens: input,
            output_tokens: output,
            status,
        }
    }

    #[test]
    fn cost_arithmetic() {
        let pricing = Pricing {
            input_per_1k: 0.5,
            output_per_1k: 1.5,
        };
        assert_eq!(estimate_cost(&[], &pricing).total_usd, 0.0);
        assert_eq!(estimate_cost(&[], &pricing).per_1k_samples_usd, None);
        let records = vec![rec(GenerationStatus::Ok, 1000, 1000), rec(GenerationStatus::Ok, 1000, 1000)];
        let report = estimate_cost(&records, &pricing);
        assert_eq!(report.total_usd, 4.0);
        assert_eq!(report.per_1k_samples_usd, Some(2000.0));
        let failed = estimate_cost(&[rec(GenerationStatus::NoCode, 10, 10)], &pricing);
        assert_eq!(failed.per_1k_samples_usd, None);
    }

    #[test]
    fn record_wire_format() {
        let r = GenerationRecord {
            extracted_code: Some("int f;".into()),
            ..rec(GenerationStatus::NoCode, 3, 4)
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["status"], "no_code");
        assert_eq!(v["extracted_code"], "int f;");
        assert!(v.get("raw_response").is_none());
    }

    #[test]
    fn journal_tolerates_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let good = serde_json::to_string(&rec(GenerationStatus::Ok, 1, 1)).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"prompt_id\":\"q\",\"att")).unwrap();
        let j = Journal::open(&path).unwrap();
        assert_eq!(j.len(), 1);
        j.append(&GenerationRecord { prompt_id: "q".into(), ..rec(GenerationStatus::Ok, 1, 1) }).unwrap();
        drop(j);
        let j = Journal::open(&path).unwrap();
        assert!(j.completed("q").is_some());
    }

    proptest::proptest! {
        #[test]
        fn cost_is_linear(tokens in proptest::collection::vec((0u64..1_000_000, 0u64..1_000_000), 0..20),
                          pin in 0.0f64..10.0, pout in 0.0f64..10.0) {
            let pricing = Pricing { input_per_1k: pin, output_per_1k: pout };
            let records: Vec<_> = tokens.iter().map(|&(i, o)| rec(GenerationStatus::Ok, i, o)).collect();
            let doubled: Vec<_> = tokens.iter().map(|&(i, o)| rec(GenerationStatus::Ok, 2 * i, 2 * o)).collect();
            // doubling is exact in binary floating point
            proptest::prop_assert_eq!(estimate_cost(&doubled, &pricing).total_usd, 2.0 * estimate_cost(&records, &pricing).total_usd);
        }
    }
}
