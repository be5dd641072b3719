//! HTTP backend speaking the common chat-completions JSON wire format.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::domain::TokenUsage;

use super::{estimate_usage, Backend, BackendError, Choice, Completion, CompletionRequest, ModelSpec};

/// Talks to a chat-completions endpoint over HTTP with retry and backoff.
///
/// Transient failures (connect errors, timeouts, HTTP 429 and 5xx) retry up
/// to `max_retries` times with exponentially growing delays starting at
/// `retry_base_ms`. Reported latency covers the whole call, backoff
/// included. Other HTTP statuses fail immediately.
pub struct HttpBackend {
    spec: ModelSpec,
    client: reqwest::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    /// Builds the backend, resolving credentials from the environment when
    /// the spec names a key variable.
    pub fn new(spec: ModelSpec) -> Result<Self, BackendError> {
        let api_key = match &spec.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::MissingCredentials(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpBackend { spec, client, api_key })
    }

    async fn attempt(&self, request: &CompletionRequest) -> Result<Completion, AttemptError> {
        let body = WireRequest {
            model: &request.model_name,
            messages: vec![
                WireMessage { role: "system", content: &request.system_prompt },
                WireMessage { role: "user", content: &request.user_prompt },
            ],
            temperature: request.temperature,
            n: request.num_choices,
            logprobs: request.want_logprobs.then_some(true),
        };
        let mut call = self.client.post(&self.spec.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().await.map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("http status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(BackendError::Transport {
                attempts: 0,
                message: format!("http status {status}"),
            }));
        }
        let wire: WireResponse = response
            .json()
            .await
            .map_err(|e| AttemptError::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        parse_completion(request, wire).map_err(AttemptError::Fatal)
    }
}

enum AttemptError {
    Transient(String),
    Fatal(BackendError),
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        if request.want_logprobs && !self.spec.supports_logprobs {
            return Err(BackendError::LogprobsUnsupported { model: self.spec.name.clone() });
        }
        let started = Instant::now();
        let mut last_transient = String::new();
        for attempt in 0..=self.spec.max_retries {
            if attempt > 0 {
                let delay = self.spec.retry_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                tokio::time::sleep(Duration::from_millis(delay)).await;
            }
            match self.attempt(request).await {
                Ok(mut completion) => {
                    completion.latency_ms = started.elapsed().as_millis() as u64;
                    return Ok(completion);
                }
                Err(AttemptError::Fatal(mut err)) => {
                    if let BackendError::Transport { attempts, .. } = &mut err {
                        *attempts = attempt + 1;
                    }
                    return Err(err);
                }
                Err(AttemptError::Transient(message)) => last_transient = message,
            }
        }
        Err(BackendError::Transport {
            attempts: self.spec.max_retries + 1,
            message: last_transient,
        })
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

fn parse_completion(
    request: &CompletionRequest,
    wire: WireResponse,
) -> Result<Completion, BackendError> {
    if wire.choices.len() != request.num_choices {
        return Err(BackendError::MalformedResponse(format!(
            "expected {} choices, got {}",
            request.num_choices,
            wire.choices.len()
        )));
    }
    let mut choices = Vec::with_capacity(wire.choices.len());
    for wire_choice in wire.choices {
        let text = wire_choice
            .message
            .ok_or_else(|| BackendError::MalformedResponse("choice without message".into()))?
            .content;
        let (logprob_sum, token_count) = match wire_choice.logprobs {
            Some(lp) => {
                let tokens = lp.content;
                let sum: f64 = tokens.iter().map(|t| t.logprob).sum();
                (Some(sum), Some(tokens.len() as u64))
            }
            None => {
                if request.want_logprobs {
                    return Err(BackendError::MalformedResponse(
                        "logprobs requested but absent from response".into(),
                    ));
                }
                (None, None)
            }
        };
        choices.push(Choice { text, logprob_sum, token_count });
    }
    let (usage, usage_estimated) = match wire.usage {
        Some(u) => (TokenUsage::new(u.prompt_tokens, u.completion_tokens), false),
        None => {
            let texts: Vec<String> = choices.iter().map(|c| c.text.clone()).collect();
            (estimate_usage(request, &texts), true)
        }
    };
    Ok(Completion {
        choices,
        usage,
        usage_estimated,
        model_name: wire.model.unwrap_or_else(|| request.model_name.clone()),
        latency_ms: 0,
    })
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<bool>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
    model: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: Option<WireContent>,
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireContent {
    content: String,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    logprob: f64,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}
