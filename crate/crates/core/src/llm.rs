//! Completion backends: a live OpenAI-compatible chat endpoint, a recording
//! wrapper that captures replies into a cassette, and a pure replay store
//! for deterministic offline runs.
//!
//! Live dispatch sits behind a sliding-window rate limiter and a bounded
//! in-flight semaphore; HTTP 429/5xx and transport failures retry with
//! exponential backoff. Replay never touches the network: responses come
//! from a digest-keyed cassette.

use std::collections::HashMap;
use std::env;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::prompts::PromptRequest;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("cassette has no entry for digest {0}")]
    CassetteMiss(String),
    #[error("backend unreachable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("still rate limited by the server after {0} retries")]
    RateLimited(u32),
    #[error("server error {status} persisted after {retries} retries")]
    ServerError { status: u16, retries: u32 },
    #[error("unexpected HTTP status {0}")]
    ProtocolError(u16),
    #[error("malformed completion payload: {0}")]
    MalformedPayload(String),
    #[error("cassette {path}: {message}")]
    CassetteFile { path: String, message: String },
    #[error("auth token variable {0} is not set")]
    MissingAuthToken(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

/// Time source for the limiter and backoff sleeps. Swappable so rate
/// behavior is testable without wall-clock waits.
pub trait Clock: Send + Sync {
    fn now_millis(&self) -> u64;
    fn sleep(&self, d: Duration);
}

/// Wall clock; milliseconds since construction.
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_millis(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock: sleeping advances time instantly.
pub struct SimulatedClock {
    now: AtomicU64,
}

impl SimulatedClock {
    pub fn new() -> Self {
        SimulatedClock {
            now: AtomicU64::new(0),
        }
    }
}

impl Default for SimulatedClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SimulatedClock {
    fn now_millis(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep(&self, d: Duration) {
        self.now.fetch_add(d.as_millis() as u64, Ordering::SeqCst);
    }
}

const RATE_WINDOW_MILLIS: u64 = 60_000;

/// Sliding-window limiter: at most `limit` requests issued in any 60 s span.
struct RateLimiter {
    limit: u32,
    clock: Arc<dyn Clock>,
    issued: Mutex<std::collections::VecDeque<u64>>,
}

impl RateLimiter {
    fn new(limit: u32, clock: Arc<dyn Clock>) -> Self {
        RateLimiter {
            limit: limit.max(1),
            clock,
            issued: Mutex::new(std::collections::VecDeque::new()),
        }
    }

    /// Block (via the clock) until a request may be issued; records the
    /// issue time.
    fn acquire(&self) {
        loop {
            let now = self.clock.now_millis();
            let mut issued = self.issued.lock().unwrap();
            while issued.front().is_some_and(|&t| t + RATE_WINDOW_MILLIS <= now) {
                issued.pop_front();
            }
            if (issued.len() as u32) < self.limit {
                issued.push_back(now);
                return;
            }
            let wait = issued.front().unwrap() + RATE_WINDOW_MILLIS - now;
            drop(issued);
            self.clock.sleep(Duration::from_millis(wait));
        }
    }
}

/// Counting semaphore bounding concurrent transport calls.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct SemaphorePermit<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphorePermit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphorePermit { semaphore: self }
    }
}

impl Drop for SemaphorePermit<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().unwrap();
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

/// Which dispatch strategy a backend uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendKind::Live),
            "record" => Ok(BackendKind::Record),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend kind {other:?}")),
        }
    }
}

/// Backend settings. Auth tokens are read only from the environment
/// variable named here, never from files or flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: String,
    pub auth_token_env: String,
    pub model_id: String,
    pub max_in_flight: usize,
    pub requests_per_minute: u32,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub cassette: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            auth_token_env: "OPENAI_API_KEY".into(),
            model_id: crate::prompts::DEFAULT_MODEL_ID.into(),
            max_in_flight: 4,
            requests_per_minute: 20,
            max_retries: 3,
            backoff_base_ms: 500,
            cassette: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            BackendKind::Live | BackendKind::Record => {
                if self.endpoint_url.is_empty() {
                    return Err(LlmError::InvalidConfig(
                        "live/record backends need an endpoint_url".into(),
                    ));
                }
                if self.auth_token_env.is_empty() {
                    return Err(LlmError::InvalidConfig(
                        "live/record backends need an auth_token_env".into(),
                    ));
                }
            }
            BackendKind::Replay => {
                if self.cassette.is_none() {
                    return Err(LlmError::InvalidConfig(
                        "replay backends need a cassette path".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// How the server terminated the completion. `Length` means the reply hit
/// the output-token cap and is likely truncated mid-structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

/// One completion, tagged with the digest of the request that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub request_digest: String,
}

/// Stable digest over everything that determines a completion: model,
/// temperature, output cap, and the message text. Field order is fixed and
/// values are length-delimited, so the digest is platform-independent.
pub fn digest(request: &PromptRequest) -> String {
    let mut hasher = Sha256::new();
    let mut field = |name: &str, value: &str| {
        hasher.update(name.as_bytes());
        hasher.update(b"=");
        hasher.update(value.len().to_le_bytes());
        hasher.update(value.as_bytes());
        hasher.update(b"\n");
    };
    field("model_id", &request.model_id);
    field("temperature", &format!("{:?}", request.temperature));
    field("max_output_tokens", &request.max_output_tokens.to_string());
    field("text", &request.text);
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteMetadata {
    pub model_id: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CassetteEntry {
    digest: String,
    finish_reason: FinishReason,
    text: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CassetteLine {
    Entry(CassetteEntry),
    Meta(CassetteMetadata),
}

/// Digest-keyed store of recorded completions. Serialized as UTF-8 JSON
/// lines: one metadata record, then one entry per response.
#[derive(Debug, Clone)]
pub struct Cassette {
    pub metadata: CassetteMetadata,
    entries: HashMap<String, CassetteEntry>,
    order: Vec<String>,
}

impl Cassette {
    pub fn new(model_id: impl Into<String>) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Cassette {
            metadata: CassetteMetadata {
                model_id: model_id.into(),
                created_at,
            },
            entries: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn insert(&mut self, digest: String, finish_reason: FinishReason, text: String) {
        if !self.entries.contains_key(&digest) {
            self.order.push(digest.clone());
        }
        self.entries.insert(
            digest.clone(),
            CassetteEntry {
                digest,
                finish_reason,
                text,
            },
        );
    }

    pub fn get(&self, digest: &str) -> Option<CompletionResponse> {
        self.entries.get(digest).map(|e| CompletionResponse {
            text: e.text.clone(),
            finish_reason: e.finish_reason,
            request_digest: e.digest.clone(),
        })
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.entries.contains_key(digest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::CassetteFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cassette = Cassette::new("");
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CassetteLine =
                serde_json::from_str(line).map_err(|e| LlmError::CassetteFile {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", idx + 1),
                })?;
            match parsed {
                CassetteLine::Entry(entry) => {
                    cassette.insert(entry.digest, entry.finish_reason, entry.text)
                }
                CassetteLine::Meta(meta) => cassette.metadata = meta,
            }
        }
        Ok(cassette)
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.metadata).expect("metadata serializes"));
        out.push('\n');
        for digest in &self.order {
            let entry = &self.entries[digest];
            out.push_str(&serde_json::to_string(entry).expect("entries serialize"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes()).map_err(|e| LlmError::CassetteFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Raw HTTP reply as seen by the retry logic.
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug)]
pub enum TransportError {
    Connect(String),
}

/// One HTTP round-trip to a chat-completions endpoint. Swappable so the
/// retry/rate/concurrency contract is testable without a server.
pub trait ChatTransport: Send + Sync {
    fn send(
        &self,
        endpoint: &str,
        auth_token: &str,
        body: &serde_json::Value,
    ) -> Result<TransportReply, TransportError>;
}

struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client builds"),
        }
    }
}

impl ChatTransport for HttpTransport {
    fn send(
        &self,
        endpoint: &str,
        auth_token: &str,
        body: &serde_json::Value,
    ) -> Result<TransportReply, TransportError> {
        let response = self
            .client
            .post(endpoint)
            .bearer_auth(auth_token)
            .json(body)
            .send()
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .text()
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        Ok(TransportReply { status, body })
    }
}

/// Wire body for one chat-completions call: single user message, caller's
/// sampling parameters, top-1 only.
pub fn request_body(request: &PromptRequest) -> serde_json::Value {
    serde_json::json!({
        "model": request.model_id,
        "messages": [{"role": "user", "content": request.text}],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
        "n": request.top_choices,
    })
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

fn parse_payload(body: &str, request_digest: String) -> Result<CompletionResponse, LlmError> {
    let completion: ChatCompletion =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedPayload(e.to_string()))?;
    let choice = completion
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::MalformedPayload("no choices in reply".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Other,
    };
    Ok(CompletionResponse {
        text: choice.message.content,
        finish_reason,
        request_digest,
    })
}

/// A configured completion backend. `complete` is safe to call from many
/// threads; the limiter, semaphore, and cassette serialize internally.
pub struct Backend {
    config: BackendConfig,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    semaphore: Semaphore,
    transport: Option<Box<dyn ChatTransport>>,
    cassette: Mutex<Cassette>,
}

impl Backend {
    /// Build from config: live/record get an HTTP transport, replay loads
    /// its cassette and owns no transport at all.
    pub fn from_config(config: &BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        match config.kind {
            BackendKind::Replay => {
                let path = config.cassette.as_ref().expect("validated");
                let cassette = Cassette::load(path)?;
                Ok(Self::assemble(config.clone(), None, cassette, Arc::new(SystemClock::new())))
            }
            BackendKind::Live | BackendKind::Record => {
                let cassette = match (&config.kind, &config.cassette) {
                    (BackendKind::Record, Some(path)) if path.exists() => Cassette::load(path)?,
                    _ => Cassette::new(config.model_id.clone()),
                };
                Ok(Self::assemble(
                    config.clone(),
                    Some(Box::new(HttpTransport::new())),
                    cassette,
                    Arc::new(SystemClock::new()),
                ))
            }
        }
    }

    /// Test constructor: custom transport and clock.
    pub fn with_transport(
        config: &BackendConfig,
        transport: Box<dyn ChatTransport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, LlmError> {
        config.validate()?;
        let cassette = Cassette::new(config.model_id.clone());
        Ok(Self::assemble(config.clone(), Some(transport), cassette, clock))
    }

    /// Replay over an in-memory cassette; performs no I/O of any kind.
    pub fn replay_from(cassette: Cassette, model_id: impl Into<String>) -> Self {
        let config = BackendConfig {
            kind: BackendKind::Replay,
            model_id: model_id.into(),
            cassette: Some(PathBuf::from("<memory>")),
            ..BackendConfig::default()
        };
        Self::assemble(config, None, cassette, Arc::new(SystemClock::new()))
    }

    fn assemble(
        config: BackendConfig,
        transport: Option<Box<dyn ChatTransport>>,
        cassette: Cassette,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let limiter = RateLimiter::new(config.requests_per_minute, clock.clone());
        let semaphore = Semaphore::new(config.max_in_flight);
        Backend {
            config,
            clock,
            limiter,
            semaphore,
            transport,
            cassette: Mutex::new(cassette),
        }
    }

    pub fn kind(&self) -> BackendKind {
        self.config.kind
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub fn cassette_len(&self) -> usize {
        self.cassette.lock().unwrap().len()
    }

    pub fn cassette_contains(&self, digest: &str) -> bool {
        self.cassette.lock().unwrap().contains(digest)
    }

    /// Dispatch one completion according to the backend kind.
    pub fn complete(&self, request: &PromptRequest) -> Result<CompletionResponse, LlmError> {
        let request_digest = digest(request);
        match self.config.kind {
            BackendKind::Replay => self
                .cassette
                .lock()
                .unwrap()
                .get(&request_digest)
                .ok_or(LlmError::CassetteMiss(request_digest)),
            BackendKind::Live => self.dispatch(request, request_digest),
            BackendKind::Record => {
                let response = self.dispatch(request, request_digest)?;
                self.cassette.lock().unwrap().insert(
                    response.request_digest.clone(),
                    response.finish_reason,
                    response.text.clone(),
                );
                Ok(response)
            }
        }
    }

    /// Persist the cassette (record mode) to its configured path.
    pub fn flush_cassette(&self) -> Result<(), LlmError> {
        let path = self.config.cassette.as_ref().ok_or_else(|| {
            LlmError::InvalidConfig("no cassette path configured to flush to".into())
        })?;
        self.cassette.lock().unwrap().save(path)
    }

    fn dispatch(
        &self,
        request: &PromptRequest,
        request_digest: String,
    ) -> Result<CompletionResponse, LlmError> {
        let transport = self.transport.as_ref().ok_or_else(|| {
            LlmError::InvalidConfig("backend has no transport configured".into())
        })?;
        let token = env::var(&self.config.auth_token_env)
            .map_err(|_| LlmError::MissingAuthToken(self.config.auth_token_env.clone()))?;
        let body = request_body(request);
        let mut attempt: u32 = 0;
        loop {
            self.limiter.acquire();
            let reply = {
                let _permit = self.semaphore.acquire();
                transport.send(&self.config.endpoint_url, &token, &body)
            };
            let retryable: String = match reply {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return parse_payload(&reply.body, request_digest);
                }
                Ok(reply) if reply.status == 429 => {
                    if attempt >= self.config.max_retries {
                        return Err(LlmError::RateLimited(self.config.max_retries));
                    }
                    format!("HTTP 429")
                }
                Ok(reply) if (500..600).contains(&reply.status) => {
                    if attempt >= self.config.max_retries {
                        return Err(LlmError::ServerError {
                            status: reply.status,
                            retries: self.config.max_retries,
                        });
                    }
                    format!("HTTP {}", reply.status)
                }
                Ok(reply) => return Err(LlmError::ProtocolError(reply.status)),
                Err(TransportError::Connect(message)) => {
                    if attempt >= self.config.max_retries {
                        return Err(LlmError::BackendUnavailable {
                            attempts: attempt + 1,
                            last: message,
                        });
                    }
                    message
                }
            };
            log::debug!("attempt {attempt} failed ({retryable}); backing off");
            let backoff = Duration::from_millis(
                self.config.backoff_base_ms.saturating_mul(1 << attempt.min(16)),
            );
            self.clock.sleep(backoff);
            attempt += 1;
        }
    }
}
