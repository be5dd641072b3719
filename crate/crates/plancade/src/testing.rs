//! Deterministic synthetic backends and a fixture corpus.
//!
//! [`SyntheticBackend`] plays both model tiers from per-task answer
//! profiles, recognizing each request by the prompt structure the engine
//! renders. It exists so integration tests and committed fixtures exercise
//! the full engine, record/replay loop, and sweep math without a model
//! server. The recognition intentionally keys on the rendered prompt
//! headings; if the templates change, requests stop matching and tests fail
//! loudly instead of drifting.
//!
//! [`corpus`] builds a fifty-task arithmetic dataset whose per-stage answer
//! profiles are tuned to exercise every interesting decision boundary:
//! unanimous early acceptance, votes inside the (0.5, 0.75) band, exact
//! boundary votes, guided-stage rescues, terminal disagreements, and
//! unparseable samples.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;

use crate::backends::{
    estimate_usage, Backend, BackendError, Choice, Completion, CompletionRequest, ModelSpec,
};
use crate::config::PipelineConfig;
use crate::costing::PriceEntry;
use crate::domain::{Gold, Role, Task, TaskKind};

/// Profile answer value that renders without a boxed marker, producing a
/// candidate whose extraction fails.
pub const UNPARSEABLE_ANSWER: &str = "<unparseable>";

/// Scripted per-stage behavior for one synthetic task.
#[derive(Clone, Debug)]
pub struct TaskProfile {
    /// Substring of the task prompt that identifies the task in requests.
    pub marker: String,
    /// Final answers of the first-stage samples, in sample order.
    pub stage1: Vec<String>,
    /// Final answers of the guided-stage samples, in sample order.
    pub stage2: Vec<String>,
    /// Final answer of the terminal large-model call.
    pub stage3: String,
}

/// A lookup table of profiles shared by both synthetic tiers.
#[derive(Debug, Default)]
pub struct SyntheticCorpus {
    profiles: Vec<TaskProfile>,
}

impl SyntheticCorpus {
    pub fn new(profiles: Vec<TaskProfile>) -> Self {
        SyntheticCorpus { profiles }
    }

    fn profile_for(&self, user_prompt: &str) -> Option<&TaskProfile> {
        self.profiles.iter().find(|p| user_prompt.contains(&p.marker))
    }
}

/// A deterministic fake model: same request, same completion, forever.
pub struct SyntheticBackend {
    spec: ModelSpec,
    corpus: Arc<SyntheticCorpus>,
}

impl SyntheticBackend {
    pub fn new(spec: ModelSpec, corpus: Arc<SyntheticCorpus>) -> Self {
        SyntheticBackend { spec, corpus }
    }
}

// The request shapes the engine can send, recognized structurally.
enum CallShape {
    GoalPlanner,
    GuidelinePlanner,
    PlanExecutor,
    GuidedExecutor,
    TakeoverExecutor,
}

fn classify(request: &CompletionRequest) -> Result<CallShape, BackendError> {
    if request.system_prompt.contains("planning assistant") {
        return Ok(CallShape::GoalPlanner);
    }
    if request.system_prompt.contains("expert advisor") {
        return Ok(CallShape::GuidelinePlanner);
    }
    let has_plan = request.user_prompt.contains("Plan to follow:");
    let has_guideline = request.user_prompt.contains("Guideline to follow:");
    match (has_plan, has_guideline) {
        (true, false) => Ok(CallShape::PlanExecutor),
        (true, true) => Ok(CallShape::GuidedExecutor),
        (false, true) => Ok(CallShape::TakeoverExecutor),
        (false, false) => Err(BackendError::MalformedResponse(
            "synthetic backend cannot classify a request with no plan headings".to_string(),
        )),
    }
}

// The sample index a first-stage executor request is following, parsed back
// out of the plan text the synthetic planner produced.
fn parse_path_index(user_prompt: &str) -> Option<usize> {
    let start = user_prompt.find("(path ")? + "(path ".len();
    let rest = &user_prompt[start..];
    let end = rest.find(')')?;
    rest[..end].parse().ok()
}

fn answer_text(marker: &str, slot: &str, value: &str) -> String {
    if value == UNPARSEABLE_ANSWER {
        format!("Sample {slot} for {marker}: the computation did not converge to anything.")
    } else {
        format!(
            "Sample {slot} for {marker}: working through the arithmetic. \
             Therefore, the final answer is: $\\boxed{{{value}}}$. I hope it is correct."
        )
    }
}

#[async_trait]
impl Backend for SyntheticBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        if request.want_logprobs {
            return Err(BackendError::LogprobsUnsupported { model: self.spec.name.clone() });
        }
        let profile = self.corpus.profile_for(&request.user_prompt).ok_or_else(|| {
            BackendError::MalformedResponse("no synthetic profile matches the request".to_string())
        })?;
        let texts: Vec<String> = match classify(request)? {
            CallShape::GoalPlanner => (0..request.num_choices)
                .map(|i| format!("Work toward the right value (path {i}) for {}.", profile.marker))
                .collect(),
            CallShape::GuidelinePlanner => vec![format!(
                "Guideline for {}: compute the sum exactly, then double-check it.",
                profile.marker
            )],
            CallShape::PlanExecutor => {
                let index = parse_path_index(&request.user_prompt).ok_or_else(|| {
                    BackendError::MalformedResponse(
                        "first-stage executor request carries no path index".to_string(),
                    )
                })?;
                let value = profile.stage1.get(index).ok_or_else(|| {
                    BackendError::MalformedResponse(format!(
                        "profile {} has no stage-1 slot {index}",
                        profile.marker
                    ))
                })?;
                vec![answer_text(&profile.marker, &format!("plan-{index}"), value)]
            }
            CallShape::GuidedExecutor => profile
                .stage2
                .iter()
                .enumerate()
                .map(|(i, value)| answer_text(&profile.marker, &format!("guided-{i}"), value))
                .collect(),
            CallShape::TakeoverExecutor => {
                vec![answer_text(&profile.marker, "terminal", &profile.stage3)]
            }
        };
        if texts.len() != request.num_choices {
            return Err(BackendError::MalformedResponse(format!(
                "synthetic profile {} supplies {} choice(s) but {} were requested",
                profile.marker,
                texts.len(),
                request.num_choices
            )));
        }
        let usage = estimate_usage(request, &texts);
        // Deterministic pseudo-latency so recorded transcripts have texture.
        let latency_ms = u64::from_str_radix(&request.request_hash()[..2], 16).unwrap_or(0);
        Ok(Completion {
            choices: texts
                .into_iter()
                .map(|text| Choice { text, logprob_sum: None, token_count: None })
                .collect(),
            usage,
            usage_estimated: false,
            model_name: self.spec.name.clone(),
            latency_ms,
        })
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

/// The synthetic dataset plus the backends that can answer for it.
pub struct SyntheticFixture {
    pub tasks: Vec<Task>,
    pub small: Arc<SyntheticBackend>,
    pub large: Arc<SyntheticBackend>,
}

/// Model name used for the synthetic small tier.
pub const SMALL_MODEL: &str = "small-7b";
/// Model name used for the synthetic large tier.
pub const LARGE_MODEL: &str = "large-xl";

/// Builds the fifty-task arithmetic corpus and its backends.
///
/// Buckets, by stage-1 vote over eight samples:
/// tasks 1-14 are unanimous; 15-24 agree 6/8; 25-32 agree 5/8 with the two
/// wrong samples first (so a four-sample prefix votes for the wrong
/// answer); 33-38 agree exactly 4/8; 39-45 scatter to 3/8 and recover at
/// the guided stage with 5/8; 46-50 scatter to 2/8, split the guided stage
/// 4/8, and lean on the terminal stage, which answers tasks 49 and 50
/// wrongly. Task 50's two scattered samples are unparseable.
pub fn corpus() -> SyntheticFixture {
    let mut tasks = Vec::new();
    let mut profiles = Vec::new();
    for k in 1..=50u32 {
        let marker = format!("synth-{k:03}");
        let c = 100 + 10 * k;
        let a = c / 2;
        let b = c - a;
        let correct = c.to_string();
        let w = |i: u32| (c + i).to_string();
        let (stage1, stage2, stage3, tag) = match k {
            1..=14 => (
                vec![correct.clone(); 8],
                vec![correct.clone(); 8],
                correct.clone(),
                "s1-unanimous",
            ),
            15..=24 => (
                to_vec(&[&w(1), &correct, &correct, &correct, &correct, &correct, &correct, &w(2)]),
                vec![correct.clone(); 8],
                correct.clone(),
                "s1-strong",
            ),
            25..=32 => (
                to_vec(&[&w(1), &w(1), &correct, &correct, &correct, &correct, &correct, &w(2)]),
                to_vec(&[&correct, &correct, &correct, &correct, &correct, &correct, &w(1), &w(2)]),
                correct.clone(),
                "s1-medium",
            ),
            33..=38 => (
                to_vec(&[&correct, &correct, &w(1), &w(2), &correct, &w(3), &correct, &w(4)]),
                to_vec(&[&correct, &correct, &correct, &correct, &correct, &correct, &w(1), &w(2)]),
                correct.clone(),
                "s1-boundary",
            ),
            39..=45 => (
                to_vec(&[&w(1), &w(2), &w(3), &correct, &w(4), &correct, &w(5), &correct]),
                to_vec(&[&correct, &correct, &correct, &correct, &w(1), &w(2), &w(3), &correct]),
                correct.clone(),
                "s2-guided",
            ),
            _ => {
                let scatter = if k == 50 {
                    to_vec(&[
                        UNPARSEABLE_ANSWER,
                        UNPARSEABLE_ANSWER,
                        &correct,
                        &w(3),
                        &w(4),
                        &correct,
                        &w(5),
                        &w(6),
                    ])
                } else {
                    to_vec(&[&w(1), &w(2), &correct, &w(3), &w(4), &correct, &w(5), &w(6)])
                };
                let terminal = if k >= 49 { w(1) } else { correct.clone() };
                (
                    scatter,
                    to_vec(&[&correct, &w(1), &correct, &w(2), &correct, &w(3), &w(4), &correct]),
                    terminal,
                    "s3-hard",
                )
            }
        };
        tasks.push(Task {
            id: marker.clone(),
            kind: TaskKind::Math,
            prompt: format!("Problem {marker}: compute {a} + {b}."),
            gold: Some(Gold::Answer(correct)),
            tests: Vec::new(),
            difficulty_tag: Some(tag.to_string()),
        });
        profiles.push(TaskProfile { marker, stage1, stage2, stage3 });
    }
    let corpus = Arc::new(SyntheticCorpus::new(profiles));
    SyntheticFixture {
        tasks,
        small: Arc::new(SyntheticBackend::new(
            fixture_model(SMALL_MODEL, Role::Small),
            corpus.clone(),
        )),
        large: Arc::new(SyntheticBackend::new(fixture_model(LARGE_MODEL, Role::Large), corpus)),
    }
}

fn to_vec(values: &[&str]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

fn fixture_model(name: &str, role: Role) -> ModelSpec {
    // The endpoint is deliberately unroutable: anything that tries to dial
    // it instead of replaying from cache fails immediately.
    let mut spec = ModelSpec::local(name, role);
    spec.endpoint = "http://127.0.0.1:9/v1/chat/completions".to_string();
    spec
}

/// The pipeline configuration the committed fixtures were recorded under.
pub fn fixture_config() -> PipelineConfig {
    let mut config = PipelineConfig::default_three_stage(11);
    let mut models = BTreeMap::new();
    models.insert(Role::Small, fixture_model(SMALL_MODEL, Role::Small));
    models.insert(Role::Large, fixture_model(LARGE_MODEL, Role::Large));
    config.models = models;
    config.pricing.insert(SMALL_MODEL.to_string(), PriceEntry::priced("0.05", "0.20").unwrap());
    config.pricing.insert(LARGE_MODEL.to_string(), PriceEntry::priced("2.50", "10.00").unwrap());
    config
}

/// The committed fixtures directory at the workspace root.
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}
