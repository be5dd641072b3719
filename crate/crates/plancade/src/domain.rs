//! Core vocabulary of the cascade: tasks, plans, candidates, answers, and
//! stage policies.
//!
//! Everything in this module is plain data. The engine wires these types
//! together; the confidence and extraction modules give them their semantics.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costing::Money;

/// What a task is asking for. Drives prompt selection and answer extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A problem with a single extractable final answer in a boxed marker.
    Math,
    /// A programming problem judged by executing test assertions.
    Code,
    /// Free-form generation with no single comparable answer.
    OpenEnded,
    /// One action choice inside a longer agent episode.
    DecisionStep,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskKind::Math => "math",
            TaskKind::Code => "code",
            TaskKind::OpenEnded => "open_ended",
            TaskKind::DecisionStep => "decision_step",
        };
        f.write_str(name)
    }
}

/// A single visible or hidden test: one assertion, optionally preceded by
/// setup code that the assertion depends on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TestCase {
    /// A single assertion statement, e.g. `assert f(2) == 4`.
    pub assertion: String,
    /// Code executed before the assertion (imports, helper data).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setup: Option<String>,
}

impl TestCase {
    pub fn new(assertion: impl Into<String>) -> Self {
        TestCase { assertion: assertion.into(), setup: None }
    }

    pub fn with_setup(assertion: impl Into<String>, setup: impl Into<String>) -> Self {
        TestCase { assertion: assertion.into(), setup: Some(setup.into()) }
    }
}

// Accepts either a bare assertion string or the full object form.
impl<'de> Deserialize<'de> for TestCase {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Bare(String),
            Full { assertion: String, setup: Option<String> },
        }
        Ok(match Repr::deserialize(deserializer)? {
            Repr::Bare(assertion) => TestCase { assertion, setup: None },
            Repr::Full { assertion, setup } => TestCase { assertion, setup },
        })
    }
}

/// Reference material for scoring a finished task. Never visible to the
/// models and never consulted by stage verdicts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    /// A reference final answer, compared after normalization.
    Answer(String),
    /// Held-out test cases a generated program must pass.
    Tests(Vec<TestCase>),
}

/// One unit of work flowing through the cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Stable identifier, unique within a dataset.
    pub id: String,
    pub kind: TaskKind,
    /// The problem statement shown to the models.
    pub prompt: String,
    /// Scoring reference; absent for unlabeled data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Gold>,
    /// Visible tests used by pass-based verdicts (code tasks).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<TestCase>,
    /// Optional difficulty bucket label for report breakdowns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_tag: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("task id must be nonempty")]
    EmptyId,
    #[error("task {0}: prompt must be nonempty")]
    EmptyPrompt(String),
    #[error("task {0}: code tasks require at least one visible test")]
    MissingTests(String),
}

impl Task {
    /// Checks the structural invariants every task must satisfy before it
    /// enters the engine.
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.id.trim().is_empty() {
            return Err(TaskError::EmptyId);
        }
        if self.prompt.trim().is_empty() {
            return Err(TaskError::EmptyPrompt(self.id.clone()));
        }
        if self.kind == TaskKind::Code && self.tests.is_empty() {
            return Err(TaskError::MissingTests(self.id.clone()));
        }
        Ok(())
    }
}

/// Which model tier serves a call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Small,
    Large,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Small => "small",
            Role::Large => "large",
        })
    }
}

/// The two plan granularities a planner can produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// A one-sentence statement of what the problem is asking.
    Goal,
    /// A short strategy sketch for how to solve it.
    Guideline,
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanKind::Goal => "goal",
            PlanKind::Guideline => "guideline",
        })
    }
}

/// Guidance text carried across stages.
///
/// `stage_of_origin` names the canonical producing stage: 1 for small-model
/// goal plans, 2 for large-model guidelines. It is about provenance, not the
/// position of a stage in a particular pipeline, so a pipeline that starts
/// directly at the guideline stage still labels its plan with origin 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub kind: PlanKind,
    /// The plan text, carried verbatim into downstream prompts.
    pub text: String,
    pub producer_role: Role,
    /// Canonical producing stage: 1 (small planner) or 2 (large planner).
    pub stage_of_origin: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan stage_of_origin must be 1 or 2, got {0}")]
    InvalidOrigin(u8),
    #[error("stage {origin} plans must be produced by the {expected} model, got {actual}")]
    RoleMismatch { origin: u8, expected: Role, actual: Role },
}

impl Plan {
    /// Builds a plan, enforcing that origin 1 is small-produced and origin 2
    /// is large-produced.
    pub fn new(
        kind: PlanKind,
        text: impl Into<String>,
        producer_role: Role,
        stage_of_origin: u8,
    ) -> Result<Self, PlanError> {
        let expected = match stage_of_origin {
            1 => Role::Small,
            2 => Role::Large,
            other => return Err(PlanError::InvalidOrigin(other)),
        };
        if producer_role != expected {
            return Err(PlanError::RoleMismatch {
                origin: stage_of_origin,
                expected,
                actual: producer_role,
            });
        }
        Ok(Plan { kind, text: text.into(), producer_role, stage_of_origin })
    }
}

static FAILED_KEY_NONCE: AtomicU64 = AtomicU64::new(0);

fn next_failed_nonce() -> u64 {
    FAILED_KEY_NONCE.fetch_add(1, Ordering::Relaxed)
}

/// Canonical comparable form of an extracted answer.
///
/// `Failed` carries a process-unique nonce so that every unparseable answer
/// is its own singleton when candidates are grouped for voting. The nonce is
/// never serialized; deserialized failed keys receive a fresh one.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Canonical {
    /// Exact reduced rational with a positive denominator.
    Rational { num: i128, den: i128 },
    /// Case-normalized trimmed text for non-numeric answers.
    Text(String),
    /// Extraction or normalization failed; unequal to every other key.
    Failed(#[serde(skip, default = "next_failed_nonce")] u64),
}

/// An answer in both its surface and comparable forms.
///
/// Failed keys deliberately have no equality with anything, including each
/// other, so `AnswerKey` does not implement `PartialEq`; compare through
/// [`crate::extraction::answers_equivalent`] or group by [`AnswerKey::canonical`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnswerKey {
    /// The extracted surface form before normalization.
    pub raw: String,
    pub canonical: Canonical,
    /// True when no comparable answer could be produced.
    pub parse_failed: bool,
}

impl AnswerKey {
    pub fn rational(raw: impl Into<String>, num: i128, den: i128) -> Self {
        debug_assert!(den > 0, "canonical rationals keep a positive denominator");
        AnswerKey {
            raw: raw.into(),
            canonical: Canonical::Rational { num, den },
            parse_failed: false,
        }
    }

    pub fn text(raw: impl Into<String>, normalized: impl Into<String>) -> Self {
        AnswerKey {
            raw: raw.into(),
            canonical: Canonical::Text(normalized.into()),
            parse_failed: false,
        }
    }

    /// A key that will never match any other key, failed or not.
    pub fn failed(raw: impl Into<String>) -> Self {
        AnswerKey {
            raw: raw.into(),
            canonical: Canonical::Failed(next_failed_nonce()),
            parse_failed: true,
        }
    }
}

/// Prompt and completion token counts for one model call or one candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        TokenUsage { prompt_tokens, completion_tokens }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens.saturating_add(self.completion_tokens)
    }

    /// Splits a batched call's usage into `n` per-candidate shares whose sum
    /// equals the original exactly; earlier shares absorb the remainder.
    pub fn split_even(&self, n: usize) -> Vec<TokenUsage> {
        assert!(n > 0, "cannot split usage across zero candidates");
        let n64 = n as u64;
        let share = |total: u64, i: u64| total / n64 + u64::from(i < total % n64);
        (0..n64)
            .map(|i| TokenUsage {
                prompt_tokens: share(self.prompt_tokens, i),
                completion_tokens: share(self.completion_tokens, i),
            })
            .collect()
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens.saturating_add(rhs.prompt_tokens),
            completion_tokens: self.completion_tokens.saturating_add(rhs.completion_tokens),
        }
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> TokenUsage {
        iter.fold(TokenUsage::default(), |acc, u| acc + u)
    }
}

/// One sampled solution attempt within a stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Candidate {
    /// The full generated text.
    pub text: String,
    /// The answer extracted from `text` under the task kind's rule.
    pub answer: AnswerKey,
    /// Sum of natural-log token probabilities, when the backend reports them.
    pub logprob_sum: Option<f64>,
    /// Number of generated tokens covered by `logprob_sum`.
    pub token_count: Option<u64>,
    /// Position within the sampling batch; unique per batch.
    pub sample_index: usize,
    /// This candidate's share of the producing call's token usage.
    pub usage: TokenUsage,
}

/// How a confidence ratio is compared against a stage threshold.
///
/// `MeetsOrExceeds` is the default: a 6-of-8 vote meets a 0.75 threshold.
/// `StrictlyExceeds` escalates that same vote.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    #[default]
    MeetsOrExceeds,
    StrictlyExceeds,
}

// Threshold comparisons are exact: the configured value is snapped to a
// rational with denominator 1e9, covering every decimal an operator can
// plausibly write, and compared by cross-multiplication.
const THRESHOLD_DEN: u64 = 1_000_000_000;

impl Comparator {
    /// Decides whether a vote of `mode_count` out of `n` satisfies
    /// `threshold` under this comparator, with no floating-point comparison.
    pub fn holds(&self, mode_count: usize, n: usize, threshold: f64) -> bool {
        let thr_num = (threshold * THRESHOLD_DEN as f64).round() as u64;
        let lhs = mode_count as u128 * THRESHOLD_DEN as u128;
        let rhs = thr_num as u128 * n as u128;
        match self {
            Comparator::MeetsOrExceeds => lhs >= rhs,
            Comparator::StrictlyExceeds => lhs > rhs,
        }
    }
}

/// How stage verdicts are decided.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Majority vote over equivalent extracted answers.
    #[default]
    Consensus,
    /// Accept when at least one candidate passes every visible test.
    PassBased,
    /// Accept when the lowest candidate perplexity is at or under a bound.
    Perplexity,
}

impl fmt::Display for ConfidenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfidenceMode::Consensus => "consensus",
            ConfidenceMode::PassBased => "pass_based",
            ConfidenceMode::Perplexity => "perplexity",
        })
    }
}

/// Per-stage knobs: who plans, who executes, how many samples, and the
/// acceptance threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePolicy {
    /// Candidate count `n` for this stage's sampling batch.
    pub num_samples: usize,
    /// Acceptance threshold in [0, 1]; unused on terminal stages.
    pub threshold: f64,
    pub planner_role: Role,
    pub executor_role: Role,
    pub planner_temperature: f64,
    pub executor_temperature: f64,
    /// Which plan granularity this stage's planner produces.
    pub plan_kind: PlanKind,
    /// Terminal stages accept their best candidate unconditionally.
    pub terminal: bool,
}

/// The outcome of one task after the cascade finishes with it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outcome {
    pub task_id: String,
    pub final_answer: AnswerKey,
    /// 1-based position of the stage whose verdict stood.
    pub resolved_stage: usize,
    /// The confidence value behind the accepting verdict.
    pub confidence: f64,
    /// Exact total spend across every call made for this task.
    pub cost: Money,
    /// Where this task's call records live in the run transcript.
    pub transcript_ref: String,
    /// True when a terminal stage had to accept an unparseable answer.
    pub unresolved_answer: bool,
}
