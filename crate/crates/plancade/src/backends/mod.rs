//! Model transports.
//!
//! A [`Backend`] answers chat-completion requests. Four implementations
//! cover the lifecycle of a run: [`HttpBackend`] speaks the common JSON wire
//! format to a live endpoint, [`ScriptedBackend`] serves queued texts for
//! tests, [`RecordingBackend`] wraps another backend and persists every
//! exchange to a transcript cache, and [`ReplayBackend`] serves a recorded
//! cache with no network at all.
//!
//! Requests are identified by a digest over every request field, so a replay
//! is exact: change one prompt byte and the lookup misses instead of
//! returning a stale answer.

mod cache;
mod http;
mod scripted;

pub use cache::{CacheAppender, CacheIssue, CacheRecord, RecordingBackend, ReplayBackend, TranscriptCache};
pub use http::HttpBackend;
pub use scripted::{ScriptedBackend, ScriptedChoice};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Role, TokenUsage};

/// Connection and behavior settings for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Model name sent on the wire and used for pricing lookups.
    pub name: String,
    /// Which cascade role this model serves by default.
    #[serde(default = "default_role")]
    pub role_default: Role,
    /// Where calls go: an http(s) URL, or the marker `replay`.
    pub endpoint: String,
    /// Whether the endpoint can return per-token logprobs.
    #[serde(default)]
    pub supports_logprobs: bool,
    /// Retries after a transient transport failure.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Per-attempt request timeout.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// First retry backoff; doubles per attempt.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    /// Environment variable holding the API key, when the endpoint needs one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

fn default_role() -> Role {
    Role::Small
}

fn default_max_retries() -> u32 {
    3
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_retry_base_ms() -> u64 {
    200
}

impl ModelSpec {
    /// A minimal spec for programmatic backends (scripted, synthetic).
    pub fn local(name: impl Into<String>, role: Role) -> Self {
        ModelSpec {
            name: name.into(),
            role_default: role,
            endpoint: "local".into(),
            supports_logprobs: false,
            max_retries: default_max_retries(),
            timeout_ms: default_timeout_ms(),
            retry_base_ms: default_retry_base_ms(),
            api_key_env: None,
        }
    }
}

/// One chat-completion request. The digest returned by
/// [`CompletionRequest::request_hash`] is a pure function of every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_name: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    /// Number of sampled choices to return.
    pub num_choices: usize,
    /// Request per-token logprobs for each choice.
    pub want_logprobs: bool,
}

impl CompletionRequest {
    /// Content digest identifying this request in transcript caches. Fields
    /// are length-framed before hashing so no two distinct requests can
    /// collide by concatenation.
    pub fn request_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut field = |bytes: &[u8]| {
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(bytes);
        };
        field(self.model_name.as_bytes());
        field(self.system_prompt.as_bytes());
        field(self.user_prompt.as_bytes());
        field(&self.temperature.to_bits().to_le_bytes());
        field(&(self.num_choices as u64).to_le_bytes());
        field(&[u8::from(self.want_logprobs)]);
        hex::encode(hasher.finalize())
    }
}

/// One sampled choice within a completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    /// Sum of natural-log token probabilities, when requested and supported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_sum: Option<f64>,
    /// Number of tokens behind `logprob_sum`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<u64>,
}

/// A backend's answer to one request. `usage` covers all choices together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub choices: Vec<Choice>,
    pub usage: TokenUsage,
    /// True when `usage` came from the whitespace heuristic, not the backend.
    #[serde(default)]
    pub usage_estimated: bool,
    pub model_name: String,
    /// Wall time of the producing call, retries and backoff included.
    /// Replayed completions report the recorded value.
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("model {model} does not support logprobs")]
    LogprobsUnsupported { model: String },
    #[error("scripted backend exhausted: {needed} more response(s) were requested")]
    ScriptExhausted { needed: usize },
    #[error("no cached completion for request {request_hash}")]
    CacheMiss { request_hash: String },
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("cache io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// A chat-completion transport.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;

    fn spec(&self) -> &ModelSpec;
}

/// Token estimate for text with no backend-reported usage: the whitespace-
/// separated word count. Coarse, but deterministic and documented; completions
/// priced from it carry an `estimated` flag through the ledger.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Estimates usage for a whole request/response pair with the whitespace
/// heuristic.
pub fn estimate_usage(request: &CompletionRequest, choice_texts: &[String]) -> TokenUsage {
    let prompt =
        whitespace_tokens(&request.system_prompt) + whitespace_tokens(&request.user_prompt);
    let completion: u64 = choice_texts.iter().map(|t| whitespace_tokens(t)).sum();
    TokenUsage::new(prompt, completion)
}

/// Wraps a backend and counts calls; tests use it to prove how many times a
/// tier was consulted (or that it never was).
pub struct CountingBackend {
    inner: Arc<dyn Backend>,
    calls: AtomicUsize,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        CountingBackend { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Backend for CountingBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request).await
    }

    fn spec(&self) -> &ModelSpec {
        self.inner.spec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> CompletionRequest {
        CompletionRequest {
            model_name: "m".into(),
            system_prompt: "sys".into(),
            user_prompt: "user".into(),
            temperature: 0.4,
            num_choices: 2,
            want_logprobs: false,
        }
    }

    #[test]
    fn request_hash_is_stable_and_sensitive() {
        let a = request();
        let b = request();
        assert_eq!(a.request_hash(), b.request_hash());

        let mut c = request();
        c.user_prompt.push('!');
        assert_ne!(a.request_hash(), c.request_hash());

        let mut d = request();
        d.temperature = 0.8;
        assert_ne!(a.request_hash(), d.request_hash());

        let mut e = request();
        e.num_choices = 3;
        assert_ne!(a.request_hash(), e.request_hash());
    }

    #[test]
    fn field_framing_prevents_concatenation_collisions() {
        let mut a = request();
        a.system_prompt = "ab".into();
        a.user_prompt = "c".into();
        let mut b = request();
        b.system_prompt = "a".into();
        b.user_prompt = "bc".into();
        assert_ne!(a.request_hash(), b.request_hash());
    }

    #[test]
    fn whitespace_estimator_counts_words() {
        assert_eq!(whitespace_tokens("one two  three\nfour"), 4);
        assert_eq!(whitespace_tokens("   "), 0);
        let usage = estimate_usage(&request(), &["a b".into(), "c".into()]);
        assert_eq!(usage, TokenUsage::new(2, 3));
    }
}
