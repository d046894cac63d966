//! Model-backend contract: chat-style generation and continuation scoring.
//!
//! Every model the pipeline talks to — sampled questioners, the scripted or
//! remote roleplayer, the gold-response oracle, the frozen scorer, the judge —
//! implements [`Backend`]. Callers go through [`BackendClient`], which adds
//! retries with capped exponential backoff, a per-backend in-flight limit,
//! and an idempotency journal keyed by caller-supplied request ids so that a
//! retried or resumed phase never double-executes a logical request.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chat message author.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One chat message. Content may be empty only for assistant placeholders
/// (e.g. a slot the model is asked to fill).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

/// A sampling request against a chat backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    /// Sampling temperature; 0.0 is greedy.
    pub temperature: f64,
    /// Optional completion cap, forwarded to backends that honor it.
    pub max_tokens: Option<u32>,
    /// Deterministic backends derive all randomness from this seed.
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        GenerationRequest { messages, temperature: 0.0, max_tokens: None, seed: None }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    /// Structural checks shared by all backends: at least one message, no
    /// empty content outside assistant placeholders, non-negative temperature.
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest {
                message: "request has no messages".into(),
            });
        }
        for (i, m) in self.messages.iter().enumerate() {
            if m.role != Role::Assistant && m.content.trim().is_empty() {
                return Err(BackendError::InvalidRequest {
                    message: format!("message {i} ({}) has empty content", m.role.as_str()),
                });
            }
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest {
                message: format!("temperature {} is not a finite non-negative number", self.temperature),
            });
        }
        Ok(())
    }
}

/// A request to score `continuation` as the next assistant message after
/// `messages`, under the backend's own tokenization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub messages: Vec<Message>,
    pub continuation: String,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest { message: "score request has no context messages".into() });
        }
        if self.continuation.trim().is_empty() {
            return Err(BackendError::InvalidRequest { message: "score request has an empty continuation".into() });
        }
        Ok(())
    }
}

/// Per-token natural-log probabilities of a continuation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub token_logprobs: Vec<f64>,
    /// Always equals `token_logprobs.len()`; kept explicit so persisted
    /// records are self-describing.
    pub token_count: usize,
}

impl ScoreResult {
    pub fn new(token_logprobs: Vec<f64>) -> Self {
        let token_count = token_logprobs.len();
        ScoreResult { token_logprobs, token_count }
    }

    /// Sum of token log-probs (the trajectory-selection quantity).
    pub fn sum(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    /// Length-normalized mean log-prob; 0.0 for an empty continuation.
    pub fn mean(&self) -> f64 {
        if self.token_logprobs.is_empty() {
            0.0
        } else {
            self.sum() / self.token_logprobs.len() as f64
        }
    }
}

/// The five pipeline roles a backend can be bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Questioner,
    Roleplayer,
    Oracle,
    BaseScorer,
    Judge,
}

impl BackendRole {
    pub const ALL: [BackendRole; 5] = [
        BackendRole::Questioner,
        BackendRole::Roleplayer,
        BackendRole::Oracle,
        BackendRole::BaseScorer,
        BackendRole::Judge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackendRole::Questioner => "questioner",
            BackendRole::Roleplayer => "roleplayer",
            BackendRole::Oracle => "oracle",
            BackendRole::BaseScorer => "base_scorer",
            BackendRole::Judge => "judge",
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// The model declined to produce usable content (e.g. a content filter).
    /// First-class so callers can exclude refusals from aggregates instead of
    /// treating them as transport failures.
    #[error("backend refused request {request_id}: {message}")]
    Refusal { request_id: String, message: String },

    /// Worth retrying: timeouts, 5xx, connection resets.
    #[error("transient backend failure: {message}")]
    Transient { message: String },

    /// Not worth retrying: auth errors, malformed requests, 4xx.
    #[error("permanent backend failure: {message}")]
    Permanent { message: String },

    #[error("retries exhausted after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: String },

    #[error("backend {backend} does not support continuation scoring")]
    ScoringUnsupported { backend: String },

    #[error("invalid request: {message}")]
    InvalidRequest { message: String },

    #[error("i/o error talking to backend: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub fn is_refusal(&self) -> bool {
        matches!(self, BackendError::Refusal { .. })
    }

    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transient { .. })
    }
}

/// A chat model the pipeline can call. Implementations must be safe to call
/// from multiple threads; deterministic implementations must be pure
/// functions of the request (including its seed).
pub trait Backend: Send + Sync {
    /// Stable identifier, recorded in artifacts for provenance.
    fn id(&self) -> &str;

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// Log-probability of `continuation` under this model. Only scoring
    /// backends override this.
    fn score_continuation(&self, request: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        let _ = request;
        Err(BackendError::ScoringUnsupported { backend: self.id().to_string() })
    }
}

/// Retry behavior for one backend binding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts including the first (so 1 disables retries).
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, base_delay_ms: 250, max_delay_ms: 4_000 }
    }
}

impl RetryPolicy {
    /// Instant retries, for mocks and tests.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay_ms: 0, max_delay_ms: 0 }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(16));
        Duration::from_millis(exp.min(self.max_delay_ms))
    }
}

/// Counting semaphore used to cap in-flight requests per backend.
struct InFlightLimit {
    permits: Mutex<usize>,
    available: Condvar,
}

impl InFlightLimit {
    fn new(permits: usize) -> Self {
        InFlightLimit { permits: Mutex::new(permits.max(1)), available: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut permits = self.permits.lock().expect("limiter poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limiter poisoned");
        }
        *permits -= 1;
        InFlightGuard { limit: self }
    }
}

struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limit.permits.lock().expect("limiter poisoned");
        *permits += 1;
        self.limit.available.notify_one();
    }
}

#[derive(Default)]
struct JournalEntry<T> {
    attempts: u32,
    result: Option<T>,
}

/// Wraps a [`Backend`] with retries, an in-flight cap, and an idempotency
/// journal. Requests carry a caller-generated id; re-sending an id whose
/// result is already journaled returns the stored result without touching
/// the backend, which makes pipeline phases safe to re-run.
pub struct BackendClient {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    limit: InFlightLimit,
    generations: Mutex<HashMap<String, JournalEntry<String>>>,
    scores: Mutex<HashMap<String, JournalEntry<ScoreResult>>>,
}

impl BackendClient {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        BackendClient {
            backend,
            retry,
            limit: InFlightLimit::new(max_in_flight),
            generations: Mutex::new(HashMap::new()),
            scores: Mutex::new(HashMap::new()),
        }
    }

    /// Client with default retry policy and a small in-flight cap.
    pub fn with_defaults(backend: Arc<dyn Backend>) -> Self {
        BackendClient::new(backend, RetryPolicy::default(), 8)
    }

    pub fn id(&self) -> &str {
        self.backend.id()
    }

    /// Attempts recorded for a request id (generation journal), for tests
    /// and diagnostics.
    pub fn generation_attempts(&self, request_id: &str) -> u32 {
        self.generations
            .lock()
            .expect("journal poisoned")
            .get(request_id)
            .map(|e| e.attempts)
            .unwrap_or(0)
    }

    /// Generate with a caller-supplied idempotency id.
    pub fn generate(&self, request_id: &str, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        if let Some(done) = self
            .generations
            .lock()
            .expect("journal poisoned")
            .get(request_id)
            .and_then(|e| e.result.clone())
        {
            return Ok(done);
        }
        let result = self.run_with_retries(request_id, |backend| backend.generate(request), |attempts| {
            let mut journal = self.generations.lock().expect("journal poisoned");
            journal.entry(request_id.to_string()).or_default().attempts = attempts;
        });
        if let Ok(ref text) = result {
            let mut journal = self.generations.lock().expect("journal poisoned");
            journal.entry(request_id.to_string()).or_default().result = Some(text.clone());
        }
        result
    }

    /// Score with a caller-supplied idempotency id.
    pub fn score_continuation(
        &self,
        request_id: &str,
        request: &ScoreRequest,
    ) -> Result<ScoreResult, BackendError> {
        request.validate()?;
        if let Some(done) = self
            .scores
            .lock()
            .expect("journal poisoned")
            .get(request_id)
            .and_then(|e| e.result.clone())
        {
            return Ok(done);
        }
        let result = self.run_with_retries(
            request_id,
            |backend| backend.score_continuation(request),
            |attempts| {
                let mut journal = self.scores.lock().expect("journal poisoned");
                journal.entry(request_id.to_string()).or_default().attempts = attempts;
            },
        );
        if let Ok(ref score) = result {
            let mut journal = self.scores.lock().expect("journal poisoned");
            journal.entry(request_id.to_string()).or_default().result = Some(score.clone());
        }
        result
    }

    fn run_with_retries<T>(
        &self,
        request_id: &str,
        call: impl Fn(&dyn Backend) -> Result<T, BackendError>,
        record_attempts: impl Fn(u32),
    ) -> Result<T, BackendError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            record_attempts(attempts);
            let outcome = {
                let _guard = self.limit.acquire();
                call(self.backend.as_ref())
            };
            match outcome {
                Ok(value) => return Ok(value),
                Err(err) if err.is_transient() && attempts < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempts - 1);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                Err(BackendError::Transient { message }) => {
                    return Err(BackendError::RetriesExhausted { attempts, last: message })
                }
                // Attach the request id to refusals so downstream records can
                // point at the exact call that was declined.
                Err(BackendError::Refusal { message, .. }) => {
                    return Err(BackendError::Refusal { request_id: request_id.to_string(), message })
                }
                Err(err) => return Err(err),
            }
        }
    }
}
