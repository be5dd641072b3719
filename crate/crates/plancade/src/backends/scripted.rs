//! A backend that serves pre-queued responses, for tests and fixtures.

use std::collections::VecDeque;
use std::sync::Mutex;

use async_trait::async_trait;

use crate::domain::TokenUsage;

use super::{estimate_usage, Backend, BackendError, Choice, Completion, CompletionRequest, ModelSpec};

/// One queued choice: the text plus optional logprob data.
#[derive(Clone, Debug)]
pub struct ScriptedChoice {
    pub text: String,
    pub logprob_sum: Option<f64>,
    pub token_count: Option<u64>,
}

impl ScriptedChoice {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedChoice { text: text.into(), logprob_sum: None, token_count: None }
    }

    pub fn with_logprobs(text: impl Into<String>, logprob_sum: f64, token_count: u64) -> Self {
        ScriptedChoice {
            text: text.into(),
            logprob_sum: Some(logprob_sum),
            token_count: Some(token_count),
        }
    }
}

/// Serves queued choices in order. Each request consumes exactly
/// `num_choices` entries; asking for more than remain is an error rather
/// than a silent reuse, so a fixture that scripts too few responses fails
/// loudly.
///
/// Usage comes from a parallel queue when one is supplied (reported as
/// measured), and from the whitespace heuristic otherwise (reported as
/// estimated).
pub struct ScriptedBackend {
    spec: ModelSpec,
    choices: Mutex<VecDeque<ScriptedChoice>>,
    usages: Mutex<VecDeque<TokenUsage>>,
}

impl ScriptedBackend {
    pub fn new(spec: ModelSpec) -> Self {
        ScriptedBackend {
            spec,
            choices: Mutex::new(VecDeque::new()),
            usages: Mutex::new(VecDeque::new()),
        }
    }

    pub fn push_text(&self, text: impl Into<String>) {
        self.push_choice(ScriptedChoice::text(text));
    }

    pub fn push_choice(&self, choice: ScriptedChoice) {
        self.choices.lock().unwrap().push_back(choice);
    }

    /// Queues measured usage for the next request that consumes one.
    pub fn push_usage(&self, usage: TokenUsage) {
        self.usages.lock().unwrap().push_back(usage);
    }

    /// True when every queued choice has been consumed.
    pub fn is_exhausted(&self) -> bool {
        self.choices.lock().unwrap().is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.choices.lock().unwrap().len()
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        if request.want_logprobs && !self.spec.supports_logprobs {
            return Err(BackendError::LogprobsUnsupported { model: self.spec.name.clone() });
        }
        let scripted: Vec<ScriptedChoice> = {
            let mut queue = self.choices.lock().unwrap();
            if queue.len() < request.num_choices {
                return Err(BackendError::ScriptExhausted {
                    needed: request.num_choices - queue.len(),
                });
            }
            queue.drain(..request.num_choices).collect()
        };
        if request.want_logprobs {
            if let Some(missing) = scripted.iter().find(|c| c.logprob_sum.is_none()) {
                return Err(BackendError::MalformedResponse(format!(
                    "scripted choice {:?} carries no logprobs but the request wants them",
                    missing.text
                )));
            }
        }
        let choices: Vec<Choice> = scripted
            .iter()
            .map(|c| Choice {
                text: c.text.clone(),
                logprob_sum: c.logprob_sum,
                token_count: c.token_count,
            })
            .collect();
        let queued_usage = self.usages.lock().unwrap().pop_front();
        let (usage, usage_estimated) = match queued_usage {
            Some(usage) => (usage, false),
            None => {
                let texts: Vec<String> = choices.iter().map(|c| c.text.clone()).collect();
                (estimate_usage(request, &texts), true)
            }
        };
        Ok(Completion {
            choices,
            usage,
            usage_estimated,
            model_name: self.spec.name.clone(),
            latency_ms: 0,
        })
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use crate::domain::Role;

    use super::*;

    fn backend() -> ScriptedBackend {
        ScriptedBackend::new(ModelSpec::local("scripted", Role::Small))
    }

    fn request(num_choices: usize) -> CompletionRequest {
        CompletionRequest {
            model_name: "scripted".into(),
            system_prompt: "s".into(),
            user_prompt: "u".into(),
            temperature: 0.0,
            num_choices,
            want_logprobs: false,
        }
    }

    #[tokio::test]
    async fn serves_queued_texts_in_order() {
        let backend = backend();
        backend.push_text("A");
        backend.push_text("B");
        let completion = backend.complete(&request(2)).await.unwrap();
        let texts: Vec<&str> = completion.choices.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["A", "B"]);
        assert!(backend.is_exhausted());
    }

    #[tokio::test]
    async fn over_consumption_errors_instead_of_reusing() {
        let backend = backend();
        backend.push_text("only");
        let err = backend.complete(&request(2)).await.unwrap_err();
        match err {
            BackendError::ScriptExhausted { needed } => assert_eq!(needed, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[tokio::test]
    async fn queued_usage_is_measured_and_heuristic_usage_is_flagged() {
        let backend = backend();
        backend.push_text("two words");
        backend.push_usage(TokenUsage::new(10, 20));
        let measured = backend.complete(&request(1)).await.unwrap();
        assert_eq!(measured.usage, TokenUsage::new(10, 20));
        assert!(!measured.usage_estimated);

        backend.push_text("three more words");
        let estimated = backend.complete(&request(1)).await.unwrap();
        assert!(estimated.usage_estimated);
        assert_eq!(estimated.usage.completion_tokens, 3);
    }

    #[tokio::test]
    async fn logprob_requests_need_a_capable_spec() {
        let backend = backend();
        backend.push_text("x");
        let mut req = request(1);
        req.want_logprobs = true;
        assert!(matches!(
            backend.complete(&req).await.unwrap_err(),
            BackendError::LogprobsUnsupported { .. }
        ));
    }
}
