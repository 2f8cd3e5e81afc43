//! In-process backend that speaks the same JSON wire format as the HTTP
//! server. Used by tests and by `--mock` runs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::client::{
    ChatRequest, EmbeddingRequest, HttpReply, TranscriptEntry, Transport, TransportError, CHAT_PATH,
    EMBEDDINGS_PATH,
};

pub enum MockRequest<'a> {
    Chat { request: &'a ChatRequest, body: &'a [u8] },
    Embed { request: &'a EmbeddingRequest, body: &'a [u8] },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    /// Completion with `finish_reason: "stop"`.
    Text(String),
    /// Completion cut at the token limit.
    Length(String),
    Embedding(Vec<f64>),
    Status(u16, String),
    /// Body sent verbatim with status 200.
    Raw(String),
    /// Connection-level failure.
    Drop,
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }
}

type Responder = Box<dyn Fn(&MockRequest<'_>) -> MockReply + Send + Sync>;

pub struct MockBackend {
    responder: Responder,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_seen: AtomicUsize,
}

/// Stable key for a request body on one endpoint.
pub fn request_fingerprint(endpoint: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(endpoint.as_bytes());
    h.update([0u8]);
    h.update(body);
    hex::encode(h.finalize())
}

impl MockBackend {
    pub fn new(responder: impl Fn(&MockRequest<'_>) -> MockReply + Send + Sync + 'static) -> Self {
        MockBackend {
            responder: Box::new(responder),
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_seen: AtomicUsize::new(0),
        }
    }

    /// Sleeps this long inside every request.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Replays the successful responses of a transcript. Unknown requests get 404.
    pub fn from_transcript_entries(entries: &[TranscriptEntry]) -> Self {
        let mut table: HashMap<String, String> = HashMap::new();
        for e in entries {
            if let (Some(status), Some(resp)) = (e.status, &e.response) {
                if (200..300).contains(&status) {
                    table.insert(request_fingerprint(&e.endpoint, e.request.as_bytes()), resp.clone());
                }
            }
        }
        MockBackend::new(move |req| {
            let (endpoint, body) = match req {
                MockRequest::Chat { body, .. } => (CHAT_PATH, *body),
                MockRequest::Embed { body, .. } => (EMBEDDINGS_PATH, *body),
            };
            match table.get(&request_fingerprint(endpoint, body)) {
                Some(resp) => MockReply::Raw(resp.clone()),
                None => MockReply::Status(404, "request not in transcript".into()),
            }
        })
    }

    pub fn from_transcript(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: TranscriptEntry = serde_json::from_str(line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            entries.push(e);
        }
        Ok(MockBackend::from_transcript_entries(&entries))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously outstanding requests observed.
    pub fn max_concurrency(&self) -> usize {
        self.max_seen.load(Ordering::SeqCst)
    }

    fn respond(&self, path: &str, body: &[u8]) -> Result<HttpReply, TransportError> {
        let reply = match path {
            CHAT_PATH => match serde_json::from_slice::<ChatRequest>(body) {
                Ok(request) => (self.responder)(&MockRequest::Chat { request: &request, body }),
                Err(e) => MockReply::Status(400, e.to_string()),
            },
            EMBEDDINGS_PATH => match serde_json::from_slice::<EmbeddingRequest>(body) {
                Ok(request) => (self.responder)(&MockRequest::Embed { request: &request, body }),
                Err(e) => MockReply::Status(400, e.to_string()),
            },
            _ => MockReply::Status(404, format!("no route {path}")),
        };
        let ok = |v: serde_json::Value| Ok(HttpReply { status: 200, body: v.to_string().into_bytes() });
        match reply {
            MockReply::Text(t) => ok(chat_body(&t, "stop")),
            MockReply::Length(t) => ok(chat_body(&t, "length")),
            MockReply::Embedding(v) => ok(serde_json::json!({
                "object": "list",
                "data": [{"object": "embedding", "index": 0, "embedding": v}],
            })),
            MockReply::Status(status, msg) => Ok(HttpReply { status, body: msg.into_bytes() }),
            MockReply::Raw(s) => Ok(HttpReply { status: 200, body: s.into_bytes() }),
            MockReply::Drop => Err(TransportError::Connect("mock connection dropped".into())),
        }
    }
}

fn chat_body(text: &str, finish: &str) -> serde_json::Value {
    serde_json::json!({
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": finish,
        }],
    })
}

impl Transport for MockBackend {
    fn post(&self, path: &str, body: &[u8], _timeout: Duration) -> Result<HttpReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_seen.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = self.respond(path, body);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
