//! Client for OpenAI-compatible inference servers.
//!
//! Requests go through a [`Transport`], which is either real HTTP
//! ([`HttpTransport`]) or the scripted [`crate::mock::MockBackend`]. The
//! client owns retries, the in-flight limiter, input truncation and the
//! request/response transcript.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{Conversation, Role};

pub const CHAT_PATH: &str = "chat/completions";
pub const EMBEDDINGS_PATH: &str = "embeddings";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("request timed out")]
    Timeout,
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(#[from] TransportError),
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ClientError> },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl ClientError {
    fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// API root including the version prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// First backoff delay in milliseconds; doubles per retry.
    #[serde(default = "default_backoff")]
    pub retry_base_delay_ms: u64,
    /// Sent instead of a zero temperature for servers that reject 0. Off by default.
    #[serde(default)]
    pub zero_temperature_substitute: Option<f64>,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            embedding_model: None,
            request_timeout: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            retry_base_delay_ms: default_backoff(),
            zero_temperature_substitute: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_in_flight == 0 {
            return Err(ClientError::Precondition("max_in_flight must be at least 1".into()));
        }
        if self.request_timeout.is_nan() || self.request_timeout <= 0.0 {
            return Err(ClientError::Precondition("request_timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Default input budget: 4 characters per token times a 512-token context.
pub const DEFAULT_INPUT_CHAR_BUDGET: usize = 4 * 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    /// Per-message character cap; `None` disables truncation.
    #[serde(default = "default_budget")]
    pub input_char_budget: Option<usize>,
    /// Sampling seed forwarded to servers that accept one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_max_new_tokens() -> u32 {
    500
}
fn default_budget() -> Option<usize> {
    Some(DEFAULT_INPUT_CHAR_BUDGET)
}

impl GenConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        GenConfig {
            temperature,
            max_new_tokens: default_max_new_tokens(),
            input_char_budget: default_budget(),
            seed: None,
        }
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig::with_temperature(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub request_id: u64,
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency: Duration,
    pub attempts: u32,
    /// Whether any message was cut to the input budget.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ClientError> {
        if values.is_empty() {
            return Err(ClientError::MalformedResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ClientError::MalformedResponse("non-finite embedding value".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

// ---- wire format ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatChoiceMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoiceMessage {
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDatum {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

pub trait Transport: Send + Sync {
    /// POSTs a JSON body to `path` (relative to the API root).
    fn post(&self, path: &str, body: &[u8], timeout: Duration) -> Result<HttpReply, TransportError>;
}

pub struct HttpTransport {
    base_url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: Option<String>) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ClientError::Precondition(format!("http client: {e}")))?;
        Ok(HttpTransport { base_url: base_url.trim_end_matches('/').to_string(), api_key, http })
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &[u8], timeout: Duration) -> Result<HttpReply, TransportError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut req = self
            .http
            .post(url)
            .timeout(timeout)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else if e.is_connect() {
                TransportError::Connect(e.to_string())
            } else {
                TransportError::Other(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| TransportError::Other(e.to_string()))?.to_vec();
        Ok(HttpReply { status, body })
    }
}

/// Counting semaphore bounding concurrent requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// One line of the transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub request_id: u64,
    pub attempt: u32,
    pub endpoint: String,
    pub request: String,
    #[serde(default)]
    pub status: Option<u16>,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    pub latency_ms: f64,
}

struct TranscriptSink {
    next_seq: u64,
    out: Box<dyn Write + Send>,
}

pub struct LlmClient {
    transport: Arc<dyn Transport>,
    config: BackendConfig,
    limiter: Limiter,
    next_request_id: AtomicU64,
    transcript: Option<Mutex<TranscriptSink>>,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, config: BackendConfig) -> Result<Self, ClientError> {
        config.validate()?;
        Ok(LlmClient {
            transport,
            limiter: Limiter::new(config.max_in_flight),
            config,
            next_request_id: AtomicU64::new(0),
            transcript: None,
        })
    }

    /// HTTP client for `config.base_url`.
    pub fn http(config: BackendConfig, api_key: Option<String>) -> Result<Self, ClientError> {
        let transport = HttpTransport::new(&config.base_url, api_key)?;
        LlmClient::new(Arc::new(transport), config)
    }

    pub fn with_transcript_writer(mut self, out: Box<dyn Write + Send>) -> Self {
        self.transcript = Some(Mutex::new(TranscriptSink { next_seq: 0, out }));
        self
    }

    /// Appends every exchange to a JSONL file.
    pub fn with_transcript_file(self, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = File::options().create(true).append(true).open(path)?;
        Ok(self.with_transcript_writer(Box::new(BufWriter::new(file))))
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn log(&self, entry_fn: impl FnOnce(u64) -> TranscriptEntry) {
        if let Some(sink) = &self.transcript {
            let mut sink = sink.lock().unwrap();
            let entry = entry_fn(sink.next_seq);
            sink.next_seq += 1;
            let line = serde_json::to_string(&entry).expect("transcript entry serializes");
            if let Err(e) = writeln!(sink.out, "{line}").and_then(|_| sink.out.flush()) {
                log::warn!("transcript write failed: {e}");
            }
        }
    }

    /// Sends `body` with retries. The same bytes are resent on every attempt.
    fn post_with_retries(&self, path: &str, body: &[u8]) -> Result<(u64, u32, Vec<u8>), ClientError> {
        let request_id = self.next_request_id.fetch_add(1, Ordering::Relaxed);
        let timeout = Duration::from_secs_f64(self.config.request_timeout);
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport.post(path, body, timeout)
            };
            let latency_ms = started.elapsed().as_secs_f64() * 1e3;
            let result = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => Ok(reply),
                Ok(reply) => Err(ClientError::Status {
                    status: reply.status,
                    body: String::from_utf8_lossy(&reply.body).into_owned(),
                }),
                Err(e) => Err(ClientError::Transport(e)),
            };
            self.log(|seq| TranscriptEntry {
                seq,
                request_id,
                attempt,
                endpoint: path.to_string(),
                request: String::from_utf8_lossy(body).into_owned(),
                status: match &result {
                    Ok(r) => Some(r.status),
                    Err(ClientError::Status { status, .. }) => Some(*status),
                    Err(_) => None,
                },
                response: result.as_ref().ok().map(|r| String::from_utf8_lossy(&r.body).into_owned()),
                error: result.as_ref().err().map(|e| e.to_string()),
                latency_ms,
            });
            match result {
                Ok(reply) => return Ok((request_id, attempt, reply.body)),
                Err(e) if e.is_transient() && attempt < max_attempts => {
                    let backoff = self.config.retry_base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    log::debug!("request {request_id} attempt {attempt} failed ({e}); retrying in {backoff} ms");
                    std::thread::sleep(Duration::from_millis(backoff));
                }
                Err(e) if attempt > 1 => {
                    return Err(ClientError::RetriesExhausted { attempts: attempt, last: Box::new(e) })
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Builds the wire request for a conversation, applying the input budget.
    pub fn chat_request(&self, conv: &Conversation, gen: &GenConfig) -> (ChatRequest, bool) {
        let mut truncated = false;
        let messages = conv
            .messages()
            .iter()
            .map(|m| {
                let content = match gen.input_char_budget {
                    Some(budget) if m.content.chars().count() > budget => {
                        truncated = true;
                        m.content.chars().take(budget).collect()
                    }
                    _ => m.content.clone(),
                };
                let role = match m.role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                WireMessage { role: role.to_string(), content }
            })
            .collect();
        let temperature = match self.config.zero_temperature_substitute {
            Some(eps) if gen.temperature == 0.0 => eps,
            _ => gen.temperature,
        };
        let req = ChatRequest {
            model: self.config.model_name.clone(),
            messages,
            temperature,
            max_tokens: gen.max_new_tokens,
            seed: gen.seed,
        };
        (req, truncated)
    }

    pub fn complete(&self, conv: &Conversation, gen: &GenConfig) -> Result<CompletionResult, ClientError> {
        if conv.is_empty() || !conv.ends_with_user() {
            return Err(ClientError::Precondition("conversation must be non-empty and end with a user turn".into()));
        }
        let started = Instant::now();
        let (req, truncated) = self.chat_request(conv, gen);
        let body = serde_json::to_vec(&req).expect("chat request serializes");
        let (request_id, attempts, reply) = self.post_with_retries(CHAT_PATH, &body)?;
        let resp: ChatResponse =
            serde_json::from_slice(&reply).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::MalformedResponse("no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let finish_reason = if text.is_empty() {
            FinishReason::Error
        } else if choice.finish_reason.as_deref() == Some("length") {
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        Ok(CompletionResult { request_id, text, finish_reason, latency: started.elapsed(), attempts, truncated })
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, ClientError> {
        if text.is_empty() {
            return Err(ClientError::Precondition("cannot embed empty text".into()));
        }
        let req = EmbeddingRequest {
            model: self.config.embedding_model.clone().unwrap_or_else(|| self.config.model_name.clone()),
            input: text.to_string(),
        };
        let body = serde_json::to_vec(&req).expect("embedding request serializes");
        let (_, _, reply) = self.post_with_retries(EMBEDDINGS_PATH, &body)?;
        let resp: EmbeddingResponse =
            serde_json::from_slice(&reply).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        let datum = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::MalformedResponse("no embedding data".into()))?;
        EmbeddingVector::new(datum.embedding)
    }
}
