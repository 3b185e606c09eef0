//! Provider-agnostic chat-completion access with token budgeting.
//!
//! Two backends exist behind one trait: a live HTTP backend speaking the
//! common chat-completion JSON shape (`messages` array in, first choice text
//! out), and a deterministic scripted backend that replays canned replies
//! from a transcript directory for offline runs and tests.
//!
//! Transcript layout: one text file per reply, named
//! `<step>_<attempt>_<iteration>.txt` (e.g. `s1.1_1_0.txt`). When the same
//! key must answer more than once, additional files carry a serial suffix
//! before the extension: `s5_1_0.2.txt`, `s5_1_0.3.txt`. Each key is a FIFO
//! queue; a consumed queue answers `TranscriptExhausted`.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_OUTPUT_CAP: u32 = 4096;
pub const DEFAULT_RATE_BUDGET: u64 = 800_000;
pub const DEFAULT_CONTEXT_WINDOW: u32 = 128_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Transcript key: which pipeline step issued the request, in which attempt
/// and loop iteration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepTag {
    pub step: String,
    pub attempt: u32,
    pub iteration: u32,
}

impl StepTag {
    pub fn new(step: impl Into<String>, attempt: u32, iteration: u32) -> Self {
        StepTag {
            step: step.into(),
            attempt,
            iteration,
        }
    }
}

impl fmt::Display for StepTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.step, self.attempt, self.iteration)
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub max_output_tokens: u32,
    pub temperature: Option<f64>,
    pub step_tag: StepTag,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, step_tag: StepTag) -> Self {
        ChatRequest {
            messages,
            max_output_tokens: DEFAULT_OUTPUT_CAP,
            temperature: Some(0.0),
            step_tag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    LiveHttp,
    Scripted,
}

/// Configuration for constructing a backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    /// Tokens-per-minute budget shared by all requests through one gateway.
    pub rate_budget: u64,
    pub transcript_path: Option<PathBuf>,
}

impl BackendDescriptor {
    pub fn scripted(transcript_path: impl Into<PathBuf>) -> Self {
        BackendDescriptor {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: None,
            rate_budget: DEFAULT_RATE_BUDGET,
            transcript_path: Some(transcript_path.into()),
        }
    }

    pub fn live(endpoint: impl Into<String>, model_name: Option<String>) -> Self {
        BackendDescriptor {
            kind: BackendKind::LiveHttp,
            endpoint: Some(endpoint.into()),
            model_name,
            rate_budget: DEFAULT_RATE_BUDGET,
            transcript_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            BackendKind::Scripted if self.transcript_path.is_none() => Err(
                GatewayError::InvalidDescriptor("scripted backend requires a transcript path"),
            ),
            BackendKind::LiveHttp if self.endpoint.is_none() => Err(
                GatewayError::InvalidDescriptor("live backend requires an endpoint"),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(&'static str),
    #[error("output budget violated: {0}")]
    BudgetExceeded(String),
    #[error("request exceeds the context window by {excess} estimated tokens")]
    ContextOverflow { excess: u64 },
    #[error("message content must be non-empty")]
    EmptyMessage,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no scripted reply left for key `{0}`")]
    TranscriptExhausted(String),
    #[error("transcript directory unreadable: {0}")]
    TranscriptUnreadable(String),
}

/// Estimated token count for budgeting purposes: `ceil(chars / 4)`.
/// This is a documented approximation; budgets gate requests, they do not
/// bill them, so tokenizer parity is a non-goal.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

fn estimate_prompt_tokens(messages: &[ChatMessage]) -> u64 {
    messages.iter().map(|m| estimate_tokens(&m.content)).sum()
}

/// Rejects requests whose estimated prompt tokens plus the output reservation
/// exceed the context window; the overflow amount lets the caller trim.
pub fn enforce_budget(request: &ChatRequest, context_window: u32) -> Result<(), GatewayError> {
    let needed = estimate_prompt_tokens(&request.messages) + u64::from(request.max_output_tokens);
    let window = u64::from(context_window);
    if needed > window {
        Err(GatewayError::ContextOverflow {
            excess: needed - window,
        })
    } else {
        Ok(())
    }
}

pub trait ChatBackend: Send {
    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, GatewayError>;
    fn kind(&self) -> BackendKind;
}

/// One row of the session transcript, appended per completed call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step_tag: StepTag,
    pub request_digest: String,
    pub reply_digest: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_time_secs: f64,
}

pub fn digest_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn digest_request(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    for m in &request.messages {
        hasher.update(match m.role {
            Role::System => b"system:".as_slice(),
            Role::User => b"user:",
            Role::Assistant => b"assistant:",
        });
        hasher.update(m.content.as_bytes());
        hasher.update(b"\x1f");
    }
    hex::encode(hasher.finalize())
}

/// Shared front door for all backends: enforces budgets, paces the rate
/// budget, and records the session transcript. Retries happen inside the
/// backend, so each logical call yields exactly one transcript entry.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    output_cap: u32,
    context_window: u32,
    rate: Option<TokenBucket>,
    transcript: Vec<TranscriptEntry>,
}

impl Gateway {
    pub fn new(descriptor: &BackendDescriptor) -> Result<Self, GatewayError> {
        Self::with_credential(descriptor, std::env::var("CVEPIPE_API_KEY").ok())
    }

    /// Like [`Gateway::new`] with an explicit credential. The credential
    /// value is held by the backend and never logged.
    pub fn with_credential(
        descriptor: &BackendDescriptor,
        api_key: Option<String>,
    ) -> Result<Self, GatewayError> {
        descriptor.validate()?;
        let backend: Box<dyn ChatBackend> = match descriptor.kind {
            BackendKind::Scripted => Box::new(ScriptedBackend::from_dir(
                descriptor.transcript_path.as_ref().unwrap(),
            )?),
            BackendKind::LiveHttp => Box::new(HttpBackend::new(
                descriptor.endpoint.clone().unwrap(),
                descriptor.model_name.clone(),
                api_key,
            )),
        };
        // Scripted replays are offline; pacing them would only slow tests.
        let rate = match descriptor.kind {
            BackendKind::LiveHttp => Some(TokenBucket::new(descriptor.rate_budget)),
            BackendKind::Scripted => None,
        };
        Ok(Gateway {
            backend,
            output_cap: DEFAULT_OUTPUT_CAP,
            context_window: DEFAULT_CONTEXT_WINDOW,
            rate,
            transcript: Vec::new(),
        })
    }

    pub fn with_backend(backend: Box<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            output_cap: DEFAULT_OUTPUT_CAP,
            context_window: DEFAULT_CONTEXT_WINDOW,
            rate: None,
            transcript: Vec::new(),
        }
    }

    pub fn context_window(&self) -> u32 {
        self.context_window
    }

    pub fn output_cap(&self) -> u32 {
        self.output_cap
    }

    pub fn complete(&mut self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        if request.max_output_tokens == 0 {
            return Err(GatewayError::BudgetExceeded(
                "max_output_tokens must be positive".into(),
            ));
        }
        if request.max_output_tokens > self.output_cap {
            return Err(GatewayError::BudgetExceeded(format!(
                "max_output_tokens {} exceeds the output cap {}",
                request.max_output_tokens, self.output_cap
            )));
        }
        if request.messages.iter().any(|m| m.content.is_empty()) {
            return Err(GatewayError::EmptyMessage);
        }
        enforce_budget(request, self.context_window)?;

        if let Some(bucket) = &mut self.rate {
            let cost =
                estimate_prompt_tokens(&request.messages) + u64::from(request.max_output_tokens);
            bucket.consume(cost);
        }

        let started = Instant::now();
        let completion = self.backend.complete(request)?;
        self.transcript.push(TranscriptEntry {
            step_tag: request.step_tag.clone(),
            request_digest: digest_request(request),
            reply_digest: digest_text(&completion.text),
            tokens_in: completion.tokens_in,
            tokens_out: completion.tokens_out,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        Ok(completion)
    }

    /// Append-only record of every completed call, in completion order.
    pub fn transcript_record(&self) -> &[TranscriptEntry] {
        &self.transcript
    }
}

/// Token bucket pacing a tokens-per-minute budget.
struct TokenBucket {
    per_minute: u64,
    available: f64,
    last_refill: Instant,
}

impl TokenBucket {
    fn new(per_minute: u64) -> Self {
        TokenBucket {
            per_minute: per_minute.max(1),
            available: per_minute as f64,
            last_refill: Instant::now(),
        }
    }

    fn refill(&mut self) {
        let elapsed = self.last_refill.elapsed().as_secs_f64();
        self.last_refill = Instant::now();
        self.available = (self.available + elapsed * self.per_minute as f64 / 60.0)
            .min(self.per_minute as f64);
    }

    /// Seconds to wait before `cost` tokens are available. Requests larger
    /// than a full minute's budget are admitted once the bucket is full.
    fn required_wait(&mut self, cost: u64) -> Duration {
        self.refill();
        let cost = (cost as f64).min(self.per_minute as f64);
        if cost <= self.available {
            Duration::ZERO
        } else {
            let deficit = cost - self.available;
            Duration::from_secs_f64(deficit * 60.0 / self.per_minute as f64)
        }
    }

    fn consume(&mut self, cost: u64) {
        let wait = self.required_wait(cost);
        if !wait.is_zero() {
            log::debug!("rate budget pacing: sleeping {:.1}s", wait.as_secs_f64());
            std::thread::sleep(wait);
            self.refill();
        }
        self.available -= (cost as f64).min(self.per_minute as f64);
    }
}

/// Deterministic backend replaying canned replies from a directory.
pub struct ScriptedBackend {
    queues: HashMap<(String, u32, u32), Vec<String>>,
}

impl ScriptedBackend {
    pub fn from_dir(dir: &Path) -> Result<Self, GatewayError> {
        let mut entries: Vec<(String, u32, u32, u32, PathBuf)> = Vec::new();
        let read_dir = std::fs::read_dir(dir)
            .map_err(|e| GatewayError::TranscriptUnreadable(format!("{}: {e}", dir.display())))?;
        for dirent in read_dir {
            let path = dirent
                .map_err(|e| GatewayError::TranscriptUnreadable(e.to_string()))?
                .path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let Some((step, attempt, iteration, serial)) = parse_transcript_stem(stem) else {
                log::warn!("ignoring transcript file with unparseable name: {stem}.txt");
                continue;
            };
            entries.push((step, attempt, iteration, serial, path));
        }
        entries.sort_by(|a, b| (&a.0, a.1, a.2, a.3).cmp(&(&b.0, b.1, b.2, b.3)));

        let mut queues: HashMap<(String, u32, u32), Vec<String>> = HashMap::new();
        for (step, attempt, iteration, _, path) in entries {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                GatewayError::TranscriptUnreadable(format!("{}: {e}", path.display()))
            })?;
            queues
                .entry((step, attempt, iteration))
                .or_default()
                .push(text);
        }
        // Pop from the front cheaply by storing queues reversed.
        for queue in queues.values_mut() {
            queue.reverse();
        }
        Ok(ScriptedBackend { queues })
    }
}

/// `s1.1_1_0` -> (s1.1, 1, 0, 1); `s5_2_3.2` -> (s5, 2, 3, 2).
fn parse_transcript_stem(stem: &str) -> Option<(String, u32, u32, u32)> {
    let (key_part, serial) = match stem.rsplit_once('.') {
        Some((rest, serial)) if serial.bytes().all(|b| b.is_ascii_digit()) && rest.contains('_') => {
            (rest, serial.parse().ok()?)
        }
        _ => (stem, 1),
    };
    let mut parts = key_part.rsplitn(3, '_');
    let iteration: u32 = parts.next()?.parse().ok()?;
    let attempt: u32 = parts.next()?.parse().ok()?;
    let step = parts.next()?.to_string();
    if step.is_empty() {
        return None;
    }
    Some((step, attempt, iteration, serial))
}

impl ChatBackend for ScriptedBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let tag = &request.step_tag;
        let key = (tag.step.clone(), tag.attempt, tag.iteration);
        let text = self
            .queues
            .get_mut(&key)
            .and_then(Vec::pop)
            .ok_or_else(|| GatewayError::TranscriptExhausted(tag.to_string()))?;
        let tokens_in = estimate_prompt_tokens(&request.messages);
        let tokens_out = estimate_tokens(&text);
        Ok(Completion {
            text,
            tokens_in,
            tokens_out,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

/// Live backend performing one HTTP round trip per call, with bounded retry
/// on transport and 5xx-class failures.
pub struct HttpBackend {
    endpoint: String,
    model_name: Option<String>,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    max_attempts: u32,
    base_backoff: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: String, model_name: Option<String>, api_key: Option<String>) -> Self {
        HttpBackend {
            endpoint,
            model_name,
            api_key,
            client: reqwest::blocking::Client::new(),
            max_attempts: 3,
            base_backoff: Duration::from_secs(1),
        }
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.base_backoff = base;
        self
    }

    fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| {
                serde_json::json!({
                    "role": match m.role {
                        Role::System => "system",
                        Role::User => "user",
                        Role::Assistant => "assistant",
                    },
                    "content": m.content,
                })
            })
            .collect();
        let mut body = serde_json::json!({
            "messages": messages,
            "max_tokens": request.max_output_tokens,
        });
        if let Some(model) = &self.model_name {
            body["model"] = serde_json::json!(model);
        }
        if let Some(t) = request.temperature {
            body["temperature"] = serde_json::json!(t);
        }
        body
    }

    fn one_round_trip(&self, request: &ChatRequest) -> Result<Completion, RoundTripError> {
        let mut builder = self.client.post(&self.endpoint).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| RoundTripError::Transient(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() {
            return Err(RoundTripError::Transient(format!("server error {status}")));
        }
        if !status.is_success() {
            return Err(RoundTripError::Fatal(format!("HTTP {status}")));
        }
        let body: serde_json::Value = response
            .json()
            .map_err(|e| RoundTripError::Fatal(format!("unparseable reply body: {e}")))?;
        let text = body
            .pointer("/choices/0/message/content")
            .or_else(|| body.pointer("/choices/0/text"))
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| RoundTripError::Fatal("reply carries no choice text".into()))?
            .to_string();
        let tokens_in = body
            .pointer("/usage/prompt_tokens")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or_else(|| estimate_prompt_tokens(&request.messages));
        let tokens_out = body
            .pointer("/usage/completion_tokens")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or_else(|| estimate_tokens(&text));
        Ok(Completion {
            text,
            tokens_in,
            tokens_out,
        })
    }
}

enum RoundTripError {
    Transient(String),
    Fatal(String),
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let mut backoff = self.base_backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.max_attempts {
            match self.one_round_trip(request) {
                Ok(completion) => return Ok(completion),
                Err(RoundTripError::Fatal(e)) => return Err(GatewayError::BackendUnavailable(e)),
                Err(RoundTripError::Transient(e)) => {
                    log::warn!("backend attempt {attempt}/{} failed: {e}", self.max_attempts);
                    last_error = e;
                    if attempt < self.max_attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(GatewayError::BackendUnavailable(format!(
            "gave up after {} attempts: {last_error}",
            self.max_attempts
        )))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::LiveHttp
    }
}
