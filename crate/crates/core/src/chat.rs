//! Chat-completion endpoint abstraction with live, replay and scripted
//! backends, exponential-backoff retries and a token-bucket rate limit.

use std::collections::{HashMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Builds a request from a prompt whose system message is wrapped in
    /// `<<sys>>...<</sys>>`. The remainder becomes the user message.
    pub fn from_prompt(model: &str, prompt: &str, temperature: f32, max_tokens: u32) -> Self {
        let (system, user) = split_system(prompt);
        let mut messages = Vec::new();
        if let Some(s) = system {
            messages.push(Message { role: Role::System, content: s.to_string() });
        }
        messages.push(Message { role: Role::User, content: user.to_string() });
        Self { model: model.to_string(), messages, temperature, max_tokens }
    }

    /// Hex SHA-256 of the canonical JSON encoding; the replay lookup key.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Splits a leading `<<sys>>...<</sys>>` block off a prompt.
pub fn split_system(prompt: &str) -> (Option<&str>, &str) {
    const OPEN: &str = "<<sys>>";
    const CLOSE: &str = "<</sys>>";
    if let Some(rest) = prompt.strip_prefix(OPEN) {
        if let Some(end) = rest.find(CLOSE) {
            let user = rest[end + CLOSE.len()..].strip_prefix('\n').unwrap_or(&rest[end + CLOSE.len()..]);
            return (Some(&rest[..end]), user);
        }
    }
    (None, prompt)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChatError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    Protocol(String),
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
}

impl ChatError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ChatError::Transport(_) => true,
            ChatError::Status { status, .. } => *status == 429 || *status >= 500,
            ChatError::Protocol(_) | ChatError::ReplayMiss(_) => false,
        }
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        (**self).complete(request)
    }
}

/// OpenAI-compatible HTTP endpoint.
pub struct HttpChatClient {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url: url.into(), api_key, agent }
    }
}

/// Pulls the completion text out of the response shapes we know about:
/// `choices[0].message.content`, `choices[0].text`, or a top-level `text` /
/// `content` field.
pub fn extract_text(body: &serde_json::Value) -> Option<String> {
    let choice = body.get("choices").and_then(|c| c.get(0));
    choice
        .and_then(|c| c.pointer("/message/content"))
        .or_else(|| choice.and_then(|c| c.get("text")))
        .or_else(|| body.get("text"))
        .or_else(|| body.get("content"))
        .and_then(|v| v.as_str())
        .map(str::to_string)
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(request)
            .map_err(|e| ChatError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ChatError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ChatError::Status { status, body });
        }
        let json: serde_json::Value =
            serde_json::from_str(&body).map_err(|e| ChatError::Protocol(e.to_string()))?;
        extract_text(&json)
            .map(|text| ChatResponse { text })
            .ok_or_else(|| ChatError::Protocol("no completion text in response".into()))
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub request_digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Serves responses from recorded transcripts, keyed by request digest.
pub struct ReplayClient {
    entries: HashMap<String, ChatResponse>,
}

impl ReplayClient {
    pub fn new(transcripts: impl IntoIterator<Item = Transcript>) -> Self {
        Self {
            entries: transcripts
                .into_iter()
                .map(|t| (t.request_digest, t.response))
                .collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, crate::jsonl::JsonlError> {
        Ok(Self::new(crate::jsonl::read::<Transcript>(path)?))
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        let digest = request.digest();
        self.entries.get(&digest).cloned().ok_or(ChatError::ReplayMiss(digest))
    }
}

/// Wraps a client and appends every successful exchange to a transcript file.
pub struct RecordingClient<C> {
    inner: C,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C, path: impl Into<PathBuf>) -> Self {
        Self { inner, path: path.into(), lock: Mutex::new(()) }
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        let response = self.inner.complete(request)?;
        let t = Transcript {
            request_digest: request.digest(),
            request: request.clone(),
            response: response.clone(),
        };
        let line = serde_json::to_string(&t).expect("transcript serializes");
        let _guard = self.lock.lock().unwrap();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| ChatError::Transport(format!("transcript write failed: {e}")))?;
        writeln!(f, "{line}").map_err(|e| ChatError::Transport(format!("transcript write failed: {e}")))?;
        Ok(response)
    }
}

/// Returns queued results in order; an exhausted queue is a transport error.
#[derive(Default)]
pub struct ScriptedClient {
    queue: Mutex<VecDeque<Result<String, ChatError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedClient {
    pub fn new(script: impl IntoIterator<Item = Result<String, ChatError>>) -> Self {
        Self { queue: Mutex::new(script.into_iter().collect()), seen: Mutex::default() }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        self.seen.lock().unwrap().push(request.clone());
        match self.queue.lock().unwrap().pop_front() {
            Some(Ok(text)) => Ok(ChatResponse { text }),
            Some(Err(e)) => Err(e),
            None => Err(ChatError::Transport("script exhausted".into())),
        }
    }
}

/// Answers every request through a closure.
pub struct FnClient<F>(pub F);

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, ChatError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        (self.0)(request).map(|text| ChatResponse { text })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Extra attempts after an unparseable response.
    pub parse_retries: u32,
    /// Extra attempts after a retryable transport failure.
    pub transport_retries: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            parse_retries: 2,
            transport_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and replay runs.
    pub fn immediate() -> Self {
        Self { base_delay: Duration::ZERO, max_delay: Duration::ZERO, ..Self::default() }
    }

    /// Delay before retry number `attempt` (0-based): base * 2^attempt, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Token bucket: `capacity` requests may burst, refilled at `per_second`.
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        let capacity = f64::from(capacity.max(1));
        Self { capacity, per_second, state: Mutex::new((capacity, Instant::now())) }
    }

    /// Blocks until a token is available and takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_second;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Shared call settings for the networked stages.
pub struct Caller<'a> {
    pub client: &'a dyn ChatClient,
    pub retry: RetryPolicy,
    pub limiter: Option<&'a RateLimiter>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    #[error("{0}")]
    Chat(ChatError),
    #[error("unparseable response after {attempts} attempts: {reason}")]
    Unparseable { attempts: u32, reason: String, last_raw: String },
}

impl Caller<'_> {
    /// One completion with transport retries and exponential backoff.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        let mut attempt = 0;
        loop {
            if let Some(l) = self.limiter {
                l.acquire();
            }
            match self.client.complete(request) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempt < self.retry.transport_retries => {
                    log::warn!("retrying after {e}");
                    std::thread::sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Completes and parses, re-asking up to `parse_retries` times when the
    /// parser rejects the text. Returns the parsed value and the raw text.
    pub fn complete_parsed<T>(
        &self,
        request: &ChatRequest,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<(T, String), CallError> {
        let attempts = self.retry.parse_retries + 1;
        let mut last = (String::new(), String::new());
        for _ in 0..attempts {
            let text = self.complete(request).map_err(CallError::Chat)?.text;
            match parse(&text) {
                Ok(v) => return Ok((v, text)),
                Err(reason) => last = (reason, text),
            }
        }
        Err(CallError::Unparseable { attempts, reason: last.0, last_raw: last.1 })
    }
}

/// Runs `f` over `items` on at most `parallelism` threads, preserving order.
pub fn run_bounded<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Strips a surrounding markdown code fence (```json ... ```), if present.
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let body = match rest.find('\n') {
            Some(nl) => &rest[nl + 1..],
            None => rest,
        };
        return body.trim_end().strip_suffix("```").unwrap_or(body).trim();
    }
    t
}
