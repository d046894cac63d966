//! HTTP backend speaking the OpenAI-compatible chat-completions protocol.
//!
//! [`RemoteBackend`] implements [`elicit_core::backend::Backend`] over two
//! endpoints of one service:
//!
//! - generation: `POST {base_url}{chat_path}` (default
//!   `/v1/chat/completions`) with the request's messages, temperature, and
//!   (when given) seed and max-token cap;
//! - continuation scoring: `POST {base_url}{completions_path}` (default
//!   `/v1/completions`) with `echo=true, logprobs=0, max_tokens=0`, which
//!   returns per-token log-probabilities for the whole prompt. The prompt
//!   is a flat rendering of the chat context followed by the continuation,
//!   and the per-token `text_offset` array is used to keep exactly the
//!   continuation's tokens.
//!
//! API keys are never written to configuration files; a binding names the
//! environment variable holding the key (`api_key_env`) and the backend
//! reads it at construction.
//!
//! Transport failures and 429/5xx responses map to
//! [`BackendError::Transient`] so the client-side retry policy applies;
//! other HTTP errors are permanent. A `content_filter` finish reason (or an
//! empty completion) maps to [`BackendError::Refusal`], which evaluation
//! code excludes from aggregates rather than retrying.

use std::collections::BTreeMap;
use std::time::Duration;

use elicit_core::backend::{Backend, BackendError, GenerationRequest, Message, ScoreRequest, ScoreResult};
use serde::{Deserialize, Serialize};

/// Connection settings for one remote binding, deserialized from the
/// binding's `params` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteParams {
    /// Service root, e.g. `https://api.example.com` (joined with the
    /// endpoint paths below).
    pub base_url: String,
    /// Model name sent with every request.
    pub model: String,
    /// Name of the environment variable holding the bearer token. Absent
    /// means the service needs no auth (local inference servers).
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_chat_path")]
    pub chat_path: String,
    #[serde(default = "default_completions_path")]
    pub completions_path: String,
    /// Extra headers some gateways require (routing, org ids, ...).
    #[serde(default)]
    pub extra_headers: BTreeMap<String, String>,
    /// Cap applied when the request itself does not set `max_tokens`.
    #[serde(default)]
    pub default_max_tokens: Option<u32>,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_chat_path() -> String {
    "/v1/chat/completions".to_string()
}

fn default_completions_path() -> String {
    "/v1/completions".to_string()
}

/// Renders a chat context into the flat prompt used for scoring and
/// returns the byte offset where an appended continuation would start.
/// The prefix ends with `"assistant: "` so the continuation begins at a
/// whitespace boundary and well-behaved tokenizers start a fresh token
/// exactly there.
pub fn render_score_prompt(messages: &[Message], continuation: &str) -> (String, usize) {
    let mut prompt = String::new();
    for message in messages {
        prompt.push_str(message.role.as_str());
        prompt.push_str(": ");
        prompt.push_str(&message.content);
        prompt.push_str("\n\n");
    }
    prompt.push_str("assistant: ");
    let boundary = prompt.len();
    prompt.push_str(continuation);
    (prompt, boundary)
}

/// One chat-completions service bound as a pipeline backend.
pub struct RemoteBackend {
    id: String,
    params: RemoteParams,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl RemoteBackend {
    /// Builds the backend, resolving the API key from the environment.
    pub fn new(id: impl Into<String>, params: RemoteParams) -> Result<Self, BackendError> {
        let api_key = match &params.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::Permanent {
                message: format!("environment variable {var} (api key for {}) is not set", params.base_url),
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(params.timeout_secs))
            .build()
            .map_err(|e| BackendError::Permanent { message: format!("http client construction failed: {e}") })?;
        Ok(RemoteBackend { id: id.into(), params, api_key, http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.params.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let mut request = self.http.post(self.url(path)).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        for (name, value) in &self.params.extra_headers {
            request = request.header(name, value);
        }
        // All transport-level failures (timeouts, resets, DNS) are worth a
        // retry; HTTP-level failures depend on the status.
        let response = request
            .send()
            .map_err(|e| BackendError::Transient { message: format!("request to {path} failed: {e}") })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transient { message: format!("reading response from {path} failed: {e}") })?;
        if status.is_success() {
            return Ok(text);
        }
        let message = format!("{path} returned {status}: {}", truncate(&text, 300));
        if status.as_u16() == 429 || status.is_server_error() {
            Err(BackendError::Transient { message })
        } else {
            Err(BackendError::Permanent { message })
        }
    }
}

fn truncate(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

fn decode<T: serde::de::DeserializeOwned>(path: &str, text: &str) -> Result<T, BackendError> {
    serde_json::from_str(text).map_err(|e| BackendError::Permanent {
        message: format!("undecodable response from {path}: {e}; body: {}", truncate(text, 300)),
    })
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Debug, Deserialize)]
struct CompletionLogprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let mut body = serde_json::json!({
            "model": self.params.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(seed) = request.seed {
            body["seed"] = serde_json::json!(seed);
        }
        if let Some(max_tokens) = request.max_tokens.or(self.params.default_max_tokens) {
            body["max_tokens"] = serde_json::json!(max_tokens);
        }
        let path = self.params.chat_path.clone();
        let text = self.post(&path, &body)?;
        let parsed: ChatResponse = decode(&path, &text)?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| BackendError::Permanent {
            message: format!("{path} returned no choices"),
        })?;
        if choice.finish_reason.as_deref() == Some("content_filter") {
            return Err(BackendError::Refusal {
                request_id: String::new(),
                message: "completion stopped by content filter".to_string(),
            });
        }
        match choice.message.content {
            Some(content) if !content.trim().is_empty() => Ok(content),
            _ => Err(BackendError::Refusal {
                request_id: String::new(),
                message: "completion contained no content".to_string(),
            }),
        }
    }

    fn score_continuation(&self, request: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        let (prompt, boundary) = render_score_prompt(&request.messages, &request.continuation);
        let body = serde_json::json!({
            "model": self.params.model,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let path = self.params.completions_path.clone();
        let text = self.post(&path, &body)?;
        let parsed: CompletionResponse = decode(&path, &text)?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| BackendError::Permanent {
            message: format!("{path} returned no choices"),
        })?;
        let logprobs = choice.logprobs.ok_or_else(|| BackendError::Permanent {
            message: format!("{path} returned no logprobs; the service may not support echo scoring"),
        })?;
        if logprobs.token_logprobs.len() != logprobs.text_offset.len() {
            return Err(BackendError::Permanent {
                message: format!(
                    "{path} returned {} token logprobs but {} text offsets",
                    logprobs.token_logprobs.len(),
                    logprobs.text_offset.len()
                ),
            });
        }

        let first = logprobs.text_offset.iter().position(|&offset| offset >= boundary).ok_or_else(|| {
            BackendError::Permanent { message: format!("{path} returned no tokens for the continuation") }
        })?;
        // A token straddling the boundary would mix prefix and continuation
        // probability mass; better to fail loudly than to score it wrong.
        if logprobs.text_offset[first] != boundary {
            return Err(BackendError::Permanent {
                message: format!(
                    "tokenization straddles the continuation boundary (expected a token at byte {boundary}, \
                     nearest starts at {})",
                    logprobs.text_offset[first]
                ),
            });
        }
        let mut token_logprobs = Vec::with_capacity(logprobs.token_logprobs.len() - first);
        for (i, lp) in logprobs.token_logprobs.iter().enumerate().skip(first) {
            match lp {
                Some(value) => token_logprobs.push(*value),
                None => {
                    return Err(BackendError::Permanent {
                        message: format!("{path} returned a null logprob inside the continuation (token {i})"),
                    })
                }
            }
        }
        Ok(ScoreResult::new(token_logprobs))
    }
}
