//! Chat-completion client used for coherence judging and pseudo-labeling.
//!
//! [`LlmClient`] owns retry, backoff and rate limiting; the wire is behind the
//! [`Transport`] trait. [`HttpTransport`] speaks the JSON chat-completion shape
//! (`messages` in, `choices` out). [`ReplayTransport`] answers from a fixture
//! file keyed by request content hash and never touches the network.
//!
//! Fixture format (`eventline-replay/v1`), a single JSON object:
//!
//! ```json
//! {"format":"eventline-replay/v1","responses":{"<sha256 hex of canonical request>":"<assistant text>"}}
//! ```
//!
//! The canonical request is compact JSON with object keys sorted and every
//! string trimmed of surrounding whitespace:
//! `{"messages":[{"content":"...","role":"system"}],"params":{"max_tokens":512,"model_id":"gpt-4o","temperature":0.0}}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsio;

pub const FIXTURE_FORMAT: &str = "eventline-replay/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams { model_id: "gpt-4o".into(), temperature: 0.0, max_tokens: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn new(params: ChatParams, messages: Vec<ChatMessage>) -> Self {
        ChatRequest { messages, params }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(self.params.temperature >= 0.0 && self.params.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature {} must be >= 0", self.params.temperature)));
        }
        Ok(())
    }

    /// Compact JSON with sorted keys and trimmed strings.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("chat request is always representable as JSON");
        let mut out = String::new();
        write_canonical(&value, &mut out);
        out
    }

    /// SHA-256 of [`ChatRequest::canonical_json`], hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::String(s) => out.push_str(&Value::String(s.trim().to_string()).to_string()),
        other => {
            let _ = write!(out, "{other}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, base_backoff_ms: 500, max_backoff_ms: 30_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based) of a call.
    ///
    /// Exponential with up to 50% jitter drawn from `seed`. Each doubling
    /// outweighs the largest jitter, so delays within a call never shrink.
    pub fn backoff(&self, retry: u32, seed: u64) -> Duration {
        let exp = self.base_backoff_ms as f64 * 2f64.powi(retry.saturating_sub(1).min(30) as i32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(retry).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let jitter: f64 = rng.random_range(0.0..0.5);
        let ms = (exp * (1.0 + jitter)).min(self.max_backoff_ms as f64);
        Duration::from_micros((ms * 1000.0) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub retry: RetryPolicy,
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            auth_env: "OPENAI_API_KEY".into(),
            retry: RetryPolicy::default(),
            requests_per_minute: 60,
            timeout_secs: 120,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.retry.max_attempts < 1 {
            return Err(LlmError::InvalidConfig("retry.max_attempts must be at least 1".into()));
        }
        if self.requests_per_minute == 0 {
            return Err(LlmError::InvalidConfig("requests_per_minute must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("upstream unavailable: {0}")]
    Unavailable(String),
    #[error("malformed upstream response: {0}")]
    Malformed(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("no fixture entry for request {0}")]
    FixtureMiss(String),
}

impl TransportError {
    fn is_retryable(&self) -> bool {
        matches!(self, TransportError::RateLimited(_) | TransportError::Unavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("authentication failure: {0}")]
    AuthFailure(String),
    #[error("upstream unavailable after {attempts} attempts: {last}")]
    UpstreamUnavailable { attempts: u32, last: String },
    #[error("malformed upstream response: {0}")]
    MalformedUpstreamResponse(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("replay fixture has no response for request {0}")]
    FixtureMiss(String),
    #[error("fixture file: {0}")]
    Fixture(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// Time source for backoff sleeps and the rate limiter.
pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Virtual clock: sleeping advances time instantly and is recorded.
#[derive(Default)]
pub struct ManualClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl ManualClock {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }

    pub fn advance(&self, by: Duration) {
        self.state.lock().unwrap().0 += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }

    fn sleep(&self, duration: Duration) {
        let mut state = self.state.lock().unwrap();
        state.0 += duration;
        state.1.push(duration);
    }
}

/// Token bucket shared by every call on a client.
struct TokenBucket {
    capacity: f64,
    tokens: f64,
    per_second: f64,
    last: Duration,
}

impl TokenBucket {
    fn new(requests_per_minute: u32, now: Duration) -> Self {
        let per_second = f64::from(requests_per_minute) / 60.0;
        let capacity = per_second.ceil().max(1.0);
        TokenBucket { capacity, tokens: capacity, per_second, last: now }
    }

    /// Takes a token, or returns how long to wait for one.
    fn try_take(&mut self, now: Duration) -> Result<(), Duration> {
        let elapsed = now.saturating_sub(self.last).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.per_second).min(self.capacity);
        self.last = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - self.tokens) / self.per_second))
        }
    }
}

/// Result of one completed call, with its retry history.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub backoffs: Vec<Duration>,
}

pub struct LlmClient {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    bucket: Mutex<TokenBucket>,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, retry: RetryPolicy, requests_per_minute: u32) -> Result<Self, LlmError> {
        Self::with_clock(transport, retry, requests_per_minute, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(
        transport: Arc<dyn Transport>,
        retry: RetryPolicy,
        requests_per_minute: u32,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, LlmError> {
        if retry.max_attempts < 1 {
            return Err(LlmError::InvalidConfig("retry.max_attempts must be at least 1".into()));
        }
        if requests_per_minute == 0 {
            return Err(LlmError::InvalidConfig("requests_per_minute must be positive".into()));
        }
        let bucket = Mutex::new(TokenBucket::new(requests_per_minute, clock.now()));
        Ok(LlmClient { transport, retry, clock, bucket })
    }

    /// Client over HTTP, with the token read from `config.auth_env`.
    pub fn from_config(config: &ClientConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let transport = HttpTransport::new(config)?;
        Self::new(Arc::new(transport), config.retry, config.requests_per_minute)
    }

    /// Client answering from a replay fixture.
    pub fn replay(fixture: &Path) -> Result<Self, LlmError> {
        let transport = ReplayTransport::load(fixture)?;
        Self::new(Arc::new(transport), RetryPolicy { max_attempts: 1, ..RetryPolicy::default() }, u32::MAX)
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut bucket = self.bucket.lock().unwrap();
                match bucket.try_take(self.clock.now()) {
                    Ok(()) => return,
                    Err(wait) => wait,
                }
            };
            self.clock.sleep(wait);
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.complete_traced(request).map(|c| c.text)
    }

    /// Like [`LlmClient::complete`], also reporting attempts and backoff delays.
    pub fn complete_traced(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        let hash = request.content_hash();
        let seed = u64::from_str_radix(&hash[..16], 16).unwrap_or(0);
        let mut backoffs = Vec::new();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.acquire();
            let err = match self.transport.send(request) {
                Ok(text) => return Ok(Completion { text, attempts: attempt, backoffs }),
                Err(e) => e,
            };
            if !err.is_retryable() {
                return Err(match err {
                    TransportError::Auth(m) => LlmError::AuthFailure(m),
                    TransportError::Malformed(m) => LlmError::MalformedUpstreamResponse(m),
                    TransportError::Rejected { status, body } => LlmError::Rejected { status, body },
                    TransportError::FixtureMiss(h) => LlmError::FixtureMiss(h),
                    TransportError::RateLimited(_) | TransportError::Unavailable(_) => unreachable!(),
                });
            }
            if attempt >= self.retry.max_attempts {
                return Err(LlmError::UpstreamUnavailable { attempts: attempt, last: err.to_string() });
            }
            let mut delay = self.retry.backoff(attempt, seed);
            if let Some(&prev) = backoffs.last() {
                delay = delay.max(prev);
            }
            backoffs.push(delay);
            self.clock.sleep(delay);
        }
    }
}

/// Chat-completion request body.
pub fn wire_request(request: &ChatRequest) -> Value {
    serde_json::json!({
        "model": request.params.model_id,
        "messages": request.messages,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_tokens,
    })
}

/// Extracts `choices[0].message.content` from a chat-completion response body.
pub fn parse_wire_response(body: &str) -> Result<String, TransportError> {
    let value: Value = serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::Malformed("missing choices[0].message.content".into()))
}

pub struct HttpTransport {
    endpoint: String,
    token: String,
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(config: &ClientConfig) -> Result<Self, LlmError> {
        let token = std::env::var(&config.auth_env)
            .map_err(|_| LlmError::AuthFailure(format!("environment variable {} is not set", config.auth_env)))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::InvalidConfig(e.to_string()))?;
        Ok(HttpTransport { endpoint: config.endpoint.clone(), token, http })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let response = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.token)
            .json(&wire_request(request))
            .send()
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError::Unavailable(e.to_string()))?;
        match status {
            200..=299 => parse_wire_response(&body),
            401 | 403 => Err(TransportError::Auth(body)),
            429 => Err(TransportError::RateLimited(body)),
            500..=599 => Err(TransportError::Unavailable(format!("status {status}"))),
            _ => Err(TransportError::Rejected { status, body }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub format: String,
    pub responses: BTreeMap<String, String>,
}

impl Default for ReplayFixture {
    fn default() -> Self {
        ReplayFixture { format: FIXTURE_FORMAT.into(), responses: BTreeMap::new() }
    }
}

impl ReplayFixture {
    pub fn insert(&mut self, request: &ChatRequest, response: impl Into<String>) {
        self.responses.insert(request.content_hash(), response.into());
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
        let fixture: ReplayFixture =
            serde_json::from_str(&text).map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
        if fixture.format != FIXTURE_FORMAT {
            return Err(LlmError::Fixture(format!("unsupported fixture format {:?}", fixture.format)));
        }
        Ok(fixture)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fsio::write_atomic(path, json.as_bytes())
    }
}

/// Deterministic transport backed by a [`ReplayFixture`].
pub struct ReplayTransport {
    fixture: ReplayFixture,
}

impl ReplayTransport {
    pub fn new(fixture: ReplayFixture) -> Self {
        ReplayTransport { fixture }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        ReplayFixture::load(path).map(Self::new)
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let hash = request.content_hash();
        self.fixture.responses.get(&hash).cloned().ok_or(TransportError::FixtureMiss(hash))
    }
}

/// Wraps a transport and records every successful exchange into a fixture.
pub struct RecordingTransport<T> {
    inner: T,
    fixture: Mutex<ReplayFixture>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        RecordingTransport { inner, fixture: Mutex::new(ReplayFixture::default()) }
    }

    pub fn fixture(&self) -> ReplayFixture {
        self.fixture.lock().unwrap().clone()
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let text = self.inner.send(request)?;
        self.fixture.lock().unwrap().insert(request, text.clone());
        Ok(text)
    }
}
