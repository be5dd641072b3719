//! The cascade engine: plan, execute, judge, escalate.
//!
//! A task walks an ordered list of stages. Each stage plans (or reuses a
//! carried plan), samples executor candidates, and judges them under the
//! run's confidence mode. An accepting verdict ends the task; an escalating
//! one carries a plan into the next, stronger stage. The last stage is
//! terminal: whatever it produces is accepted, so every task finishes.
//!
//! Stages come in two shapes, chosen by their policy:
//!
//! * plan-per-sample: planner and executor are the same role and the plan
//!   kind is a goal. One planner request with `num_samples` choices yields
//!   one plan per sample, and each sample executes following its own plan.
//!   On escalation one plan is carried forward, picked among the samples
//!   backing the stage's best answer.
//! * guided: one planner request yields a single plan (reused from an
//!   earlier stage when one of the right kind exists), and one executor
//!   request with `num_samples` choices executes under the full plan stack.
//!
//! Randomness is confined to two decisions, both drawn from the per-task
//! stream: which passing candidate a pass-based acceptance returns, and
//! which plan an escalating plan-per-sample stage carries. Terminal forced
//! acceptances are deterministic. Replaying a recorded run with the same
//! seed therefore reproduces every byte of output.

pub mod prompts;
pub mod report;
pub mod transcript;

use futures::future::join_all;
use futures::stream::{self, StreamExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, Completion, CompletionRequest};
use crate::config::PipelineConfig;
use crate::confidence::{
    consensus, decide_consensus, decide_pass_based, decide_perplexity, perplexity,
    ConfidenceError, ConsensusResult, Verdict,
};
use crate::costing::{lookup_price, price_call, CostError, CostLedger, LedgerEntry, Money};
use crate::domain::{
    AnswerKey, Candidate, ConfidenceMode, Gold, Outcome, Plan, PlanError, PlanKind, Role,
    StagePolicy, Task, TaskError,
};
use crate::evaluators::{run_code_tests, score_math, EvalError, EvalLimits, PassReport};
use crate::extraction::{extract_answer, extract_code_block, rule_for_kind};
use crate::rng::task_rng;

pub use report::{RunReport, TaskRow};
pub use transcript::TranscriptEvent;

use std::collections::BTreeMap;
use std::sync::Arc;

/// Backends bound to cascade roles for one run.
#[derive(Clone, Default)]
pub struct BackendSet {
    backends: BTreeMap<Role, Arc<dyn Backend>>,
}

impl BackendSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, role: Role, backend: Arc<dyn Backend>) {
        self.backends.insert(role, backend);
    }

    pub fn with(mut self, role: Role, backend: Arc<dyn Backend>) -> Self {
        self.insert(role, backend);
        self
    }

    pub fn get(&self, role: Role) -> Result<&Arc<dyn Backend>, EngineError> {
        self.backends.get(&role).ok_or(EngineError::MissingBackend(role))
    }
}

/// Per-task engine behavior.
#[derive(Clone, Debug, Default)]
pub struct EngineOptions {
    /// Run every stage even after an acceptance. The first acceptance still
    /// defines the outcome; the extra stages only enrich the transcript,
    /// which is what offline threshold sweeps replay against.
    pub exhaustive: bool,
    /// Resource bounds for sandboxed test execution.
    pub eval_limits: EvalLimits,
}

/// Dataset-level run behavior.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// How many tasks run concurrently.
    pub parallelism: usize,
    pub engine: EngineOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { parallelism: 4, engine: EngineOptions::default() }
    }
}

/// What a backend call was for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    Planner,
    Executor,
}

/// One priced backend call, as recorded in transcripts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CallRecord {
    /// Call sequence number within the task.
    pub seq: usize,
    /// 1-based stage the call served.
    pub stage: usize,
    pub purpose: CallPurpose,
    pub role: Role,
    pub model: String,
    pub request_hash: String,
    pub num_choices: usize,
    pub usage: crate::domain::TokenUsage,
    pub usage_estimated: bool,
    pub latency_ms: u64,
    pub cost: Money,
}

/// Everything one stage produced for one task. Enough to re-judge the stage
/// offline under different thresholds without touching a backend.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageArtifacts {
    /// 1-based position of this stage in the pipeline.
    pub stage: usize,
    /// Plans produced by this stage's planner: one per sample for
    /// plan-per-sample stages, at most one for guided stages.
    pub plans: Vec<Plan>,
    /// True when the stage reused a carried plan instead of planning again.
    pub reused_plan: bool,
    pub candidates: Vec<Candidate>,
    /// Answer grouping, populated under the consensus mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus: Option<ConsensusResult>,
    /// Visible-test outcomes per candidate, populated under pass-based mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_reports: Option<Vec<PassReport>>,
    pub verdict: Verdict,
    /// The plan this stage handed to the next one, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carried_plan: Option<Plan>,
    /// Which sample the carried plan came from (plan-per-sample stages).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carried_from_sample: Option<usize>,
    pub calls: Vec<CallRecord>,
}

/// Full record of one task's trip through the cascade.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task: Task,
    pub task_index: usize,
    pub stages: Vec<StageArtifacts>,
    pub outcome: Outcome,
    /// Correctness against gold, when the task carries gold.
    pub correct: Option<bool>,
}

/// A task the engine could not finish; the rest of the run continues.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub task_index: usize,
    pub error: String,
}

/// The outputs of a dataset run.
pub struct RunResult {
    /// Finished tasks in dataset order.
    pub traces: Vec<TaskTrace>,
    /// Tasks that errored, in dataset order.
    pub failures: Vec<TaskFailure>,
    /// Canonically ordered cost ledger over all finished tasks.
    pub ledger: CostLedger,
    pub report: RunReport,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no backend bound for role {0}")]
    MissingBackend(Role),
    #[error("backend call failed at stage {stage}: {source}")]
    Backend { stage: usize, source: BackendError },
    #[error("verdict failed at stage {stage}: {source}")]
    Confidence { stage: usize, source: ConfidenceError },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("task {task}: pass-based verdicts require visible tests")]
    PassBasedWithoutTests { task: String },
}

/// Runs one task through the cascade.
pub async fn run_task(
    task: &Task,
    task_index: usize,
    config: &PipelineConfig,
    backends: &BackendSet,
    options: &EngineOptions,
) -> Result<TaskTrace, EngineError> {
    task.validate()?;
    let mut cascade = TaskCascade {
        task,
        config,
        backends,
        options,
        rng: task_rng(config.rng_seed, &task.id),
        seq: 0,
        plans: Vec::new(),
        total_cost: Money::ZERO,
    };
    let mut stages: Vec<StageArtifacts> = Vec::new();
    let mut resolution: Option<(usize, Verdict)> = None;
    for (stage_index, stage) in config.stages.iter().enumerate() {
        let stage_no = stage_index + 1;
        let artifacts = cascade.run_stage(stage_no, stage).await?;
        if resolution.is_none() && artifacts.verdict.is_accept() {
            resolution = Some((stage_no, artifacts.verdict.clone()));
        }
        stages.push(artifacts);
        if resolution.is_some() && !options.exhaustive {
            break;
        }
    }
    let (resolved_stage, verdict) = resolution.expect("the terminal stage always accepts");
    let Verdict::Accept { answer, candidate_index, confidence } = verdict else {
        unreachable!("resolutions record only acceptances")
    };
    let outcome = Outcome {
        task_id: task.id.clone(),
        final_answer: answer.clone(),
        resolved_stage,
        confidence,
        cost: cascade.total_cost,
        transcript_ref: format!("transcripts.jsonl#{}", task.id),
        unresolved_answer: answer.parse_failed,
    };
    let accepted_text = stages[resolved_stage - 1].candidates[candidate_index].text.clone();
    let correct = score_outcome(task, &outcome, &accepted_text, &options.eval_limits).await?;
    Ok(TaskTrace { task: task.clone(), task_index, stages, outcome, correct })
}

/// Runs every task, a bounded number concurrently. One task's failure does
/// not stop the others; failures are reported alongside the finished traces.
pub async fn run_dataset(
    tasks: &[Task],
    config: &PipelineConfig,
    backends: &BackendSet,
    options: &RunOptions,
) -> Result<RunResult, EngineError> {
    // Role bindings are run-level preconditions, not per-task failures.
    for stage in &config.stages {
        backends.get(stage.planner_role)?;
        backends.get(stage.executor_role)?;
    }
    let engine_options = &options.engine;
    let mut runs: Vec<(usize, Result<TaskTrace, EngineError>)> =
        stream::iter(tasks.iter().enumerate().map(|(index, task)| async move {
            (index, run_task(task, index, config, backends, engine_options).await)
        }))
        .buffer_unordered(options.parallelism.max(1))
        .collect()
        .await;
    runs.sort_by_key(|(index, _)| *index);

    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (index, run) in runs {
        match run {
            Ok(trace) => traces.push(trace),
            Err(error) => failures.push(TaskFailure {
                task_id: tasks[index].id.clone(),
                task_index: index,
                error: error.to_string(),
            }),
        }
    }

    let mut ledger = CostLedger::new();
    for trace in &traces {
        for stage in &trace.stages {
            for call in &stage.calls {
                ledger.append(LedgerEntry {
                    task_id: trace.task.id.clone(),
                    task_index: trace.task_index,
                    seq: call.seq,
                    stage: call.stage,
                    role: call.role,
                    model: call.model.clone(),
                    usage: call.usage,
                    estimated: call.usage_estimated,
                    cost: call.cost,
                });
            }
        }
    }
    ledger.sort_canonical();
    let report = RunReport::build(config, &traces, &failures, &ledger);
    Ok(RunResult { traces, failures, ledger, report })
}

/// True for stages that give every sample its own plan.
fn plan_per_sample(stage: &StagePolicy) -> bool {
    stage.plan_kind == PlanKind::Goal && stage.planner_role == stage.executor_role
}

/// Canonical origin label for a plan kind; see [`Plan::stage_of_origin`].
fn plan_origin(kind: PlanKind) -> u8 {
    match kind {
        PlanKind::Goal => 1,
        PlanKind::Guideline => 2,
    }
}

async fn score_outcome(
    task: &Task,
    outcome: &Outcome,
    accepted_text: &str,
    limits: &EvalLimits,
) -> Result<Option<bool>, EngineError> {
    match &task.gold {
        None => Ok(None),
        Some(Gold::Answer(gold)) => Ok(Some(score_math(&outcome.final_answer, gold))),
        Some(Gold::Tests(tests)) => {
            let program = extract_code_block(accepted_text);
            let tests = tests.clone();
            let limits = *limits;
            let report =
                tokio::task::spawn_blocking(move || run_code_tests(&program, &tests, &limits))
                    .await
                    .expect("evaluation thread panicked")?;
            Ok(Some(report.all_passed))
        }
    }
}

// Mutable state for one task's walk through the stages.
struct TaskCascade<'a> {
    task: &'a Task,
    config: &'a PipelineConfig,
    backends: &'a BackendSet,
    options: &'a EngineOptions,
    rng: ChaCha8Rng,
    seq: usize,
    // Plans carried forward so far, in cascade order.
    plans: Vec<Plan>,
    total_cost: Money,
}

impl TaskCascade<'_> {
    async fn run_stage(
        &mut self,
        stage_no: usize,
        stage: &StagePolicy,
    ) -> Result<StageArtifacts, EngineError> {
        if plan_per_sample(stage) {
            self.run_plan_per_sample_stage(stage_no, stage).await
        } else {
            self.run_guided_stage(stage_no, stage).await
        }
    }

    async fn run_plan_per_sample_stage(
        &mut self,
        stage_no: usize,
        stage: &StagePolicy,
    ) -> Result<StageArtifacts, EngineError> {
        let n = stage.num_samples;
        let planner_request = self.request(
            stage.planner_role,
            prompts::planner_system(stage.plan_kind),
            prompts::planner_user(self.task, stage.plan_kind, self.latest_goal_plan()),
            stage.planner_temperature,
            n,
            false,
        )?;
        let (planning, planner_record) =
            self.call(stage_no, CallPurpose::Planner, stage.planner_role, &planner_request).await?;
        expect_choices(stage_no, &planning, n)?;
        let mut calls = vec![planner_record];
        let stage_plans: Vec<Plan> = planning
            .choices
            .iter()
            .map(|choice| {
                Plan::new(
                    stage.plan_kind,
                    choice.text.clone(),
                    stage.planner_role,
                    plan_origin(stage.plan_kind),
                )
            })
            .collect::<Result<_, _>>()?;

        // One executor call per plan, issued together; completions are
        // processed in sample order so records and costs are deterministic.
        let mut requests = Vec::with_capacity(n);
        for plan in &stage_plans {
            let mut prompt_plans = self.plans.clone();
            prompt_plans.push(plan.clone());
            requests.push(self.request(
                stage.executor_role,
                prompts::executor_system(self.task.kind),
                prompts::executor_user(self.task, stage, &prompt_plans),
                stage.executor_temperature,
                1,
                self.wants_logprobs(),
            )?);
        }
        let backend = self.backends.get(stage.executor_role)?.clone();
        let completions = join_all(requests.iter().map(|request| backend.complete(request))).await;

        let rule = rule_for_kind(self.task.kind);
        let mut candidates = Vec::with_capacity(n);
        for (i, (request, result)) in requests.iter().zip(completions).enumerate() {
            let completion =
                result.map_err(|source| EngineError::Backend { stage: stage_no, source })?;
            expect_choices(stage_no, &completion, 1)?;
            calls.push(self.record_call(
                stage_no,
                CallPurpose::Executor,
                stage.executor_role,
                request,
                &completion,
            )?);
            let choice = &completion.choices[0];
            candidates.push(Candidate {
                text: choice.text.clone(),
                answer: extract_answer(&choice.text, rule),
                logprob_sum: choice.logprob_sum,
                token_count: choice.token_count,
                sample_index: i,
                usage: completion.usage,
            });
        }

        let (verdict, consensus_result, pass_reports) =
            self.decide(stage_no, stage, &candidates).await?;
        let verdict = if stage.terminal {
            force_terminal_accept(
                verdict,
                self.config.confidence_mode,
                &candidates,
                consensus_result.as_ref(),
                pass_reports.as_deref(),
            )
        } else {
            verdict
        };

        let mut carried_plan = None;
        let mut carried_from_sample = None;
        if !stage.terminal && (!verdict.is_accept() || self.options.exhaustive) {
            let pick =
                self.pick_carried_index(&candidates, consensus_result.as_ref(), pass_reports.as_deref());
            let plan = stage_plans[pick].clone();
            self.plans.push(plan.clone());
            carried_plan = Some(plan);
            carried_from_sample = Some(pick);
        }

        Ok(StageArtifacts {
            stage: stage_no,
            plans: stage_plans,
            reused_plan: false,
            candidates,
            consensus: consensus_result,
            pass_reports,
            verdict,
            carried_plan,
            carried_from_sample,
            calls,
        })
    }

    async fn run_guided_stage(
        &mut self,
        stage_no: usize,
        stage: &StagePolicy,
    ) -> Result<StageArtifacts, EngineError> {
        let n = stage.num_samples;
        let mut calls = Vec::new();
        let mut stage_plans = Vec::new();

        // Reuse a carried plan of the right provenance; otherwise plan now.
        let reused = self
            .plans
            .iter()
            .rev()
            .find(|plan| plan.kind == stage.plan_kind && plan.producer_role == stage.planner_role)
            .cloned();
        let reused_plan = reused.is_some();
        if reused.is_none() {
            let request = self.request(
                stage.planner_role,
                prompts::planner_system(stage.plan_kind),
                prompts::planner_user(self.task, stage.plan_kind, self.latest_goal_plan()),
                stage.planner_temperature,
                1,
                false,
            )?;
            let (completion, record) =
                self.call(stage_no, CallPurpose::Planner, stage.planner_role, &request).await?;
            expect_choices(stage_no, &completion, 1)?;
            calls.push(record);
            let plan = Plan::new(
                stage.plan_kind,
                completion.choices[0].text.clone(),
                stage.planner_role,
                plan_origin(stage.plan_kind),
            )?;
            self.plans.push(plan.clone());
            stage_plans.push(plan);
        }

        // One batched executor call under the full plan stack.
        let request = self.request(
            stage.executor_role,
            prompts::executor_system(self.task.kind),
            prompts::executor_user(self.task, stage, &self.plans),
            stage.executor_temperature,
            n,
            self.wants_logprobs(),
        )?;
        let (completion, record) =
            self.call(stage_no, CallPurpose::Executor, stage.executor_role, &request).await?;
        expect_choices(stage_no, &completion, n)?;
        calls.push(record);

        let shares = completion.usage.split_even(n);
        let rule = rule_for_kind(self.task.kind);
        let candidates: Vec<Candidate> = completion
            .choices
            .iter()
            .enumerate()
            .map(|(i, choice)| Candidate {
                text: choice.text.clone(),
                answer: extract_answer(&choice.text, rule),
                logprob_sum: choice.logprob_sum,
                token_count: choice.token_count,
                sample_index: i,
                usage: shares[i],
            })
            .collect();

        let (verdict, consensus_result, pass_reports) =
            self.decide(stage_no, stage, &candidates).await?;
        let verdict = if stage.terminal {
            force_terminal_accept(
                verdict,
                self.config.confidence_mode,
                &candidates,
                consensus_result.as_ref(),
                pass_reports.as_deref(),
            )
        } else {
            verdict
        };

        // The plan carried onward is this stage's own plan, which already
        // sits on the stack.
        let carried_plan = if !stage.terminal && (!verdict.is_accept() || self.options.exhaustive) {
            reused.or_else(|| stage_plans.last().cloned())
        } else {
            None
        };

        Ok(StageArtifacts {
            stage: stage_no,
            plans: stage_plans,
            reused_plan,
            candidates,
            consensus: consensus_result,
            pass_reports,
            verdict,
            carried_plan,
            carried_from_sample: None,
            calls,
        })
    }

    // Builds a request addressed to the model bound to `role`.
    fn request(
        &self,
        role: Role,
        system_prompt: String,
        user_prompt: String,
        temperature: f64,
        num_choices: usize,
        want_logprobs: bool,
    ) -> Result<CompletionRequest, EngineError> {
        let model_name = self.backends.get(role)?.spec().name.clone();
        Ok(CompletionRequest {
            model_name,
            system_prompt,
            user_prompt,
            temperature,
            num_choices,
            want_logprobs,
        })
    }

    async fn call(
        &mut self,
        stage_no: usize,
        purpose: CallPurpose,
        role: Role,
        request: &CompletionRequest,
    ) -> Result<(Completion, CallRecord), EngineError> {
        let backend = self.backends.get(role)?.clone();
        let completion = backend
            .complete(request)
            .await
            .map_err(|source| EngineError::Backend { stage: stage_no, source })?;
        let record = self.record_call(stage_no, purpose, role, request, &completion)?;
        Ok((completion, record))
    }

    // Prices and sequences one finished call.
    fn record_call(
        &mut self,
        stage_no: usize,
        purpose: CallPurpose,
        role: Role,
        request: &CompletionRequest,
        completion: &Completion,
    ) -> Result<CallRecord, EngineError> {
        let price = lookup_price(&self.config.pricing, &request.model_name)?;
        let cost = price_call(&completion.usage, price)?;
        self.total_cost = self.total_cost.checked_add(cost).map_err(CostError::from)?;
        let record = CallRecord {
            seq: self.seq,
            stage: stage_no,
            purpose,
            role,
            model: request.model_name.clone(),
            request_hash: request.request_hash(),
            num_choices: request.num_choices,
            usage: completion.usage,
            usage_estimated: completion.usage_estimated,
            latency_ms: completion.latency_ms,
            cost,
        };
        self.seq += 1;
        Ok(record)
    }

    fn wants_logprobs(&self) -> bool {
        self.config.confidence_mode == ConfidenceMode::Perplexity
    }

    // The most recent goal plan, for guideline planner prompts.
    fn latest_goal_plan(&self) -> Option<&Plan> {
        self.plans.iter().rev().find(|plan| plan.kind == PlanKind::Goal)
    }

    async fn decide(
        &mut self,
        stage_no: usize,
        stage: &StagePolicy,
        candidates: &[Candidate],
    ) -> Result<(Verdict, Option<ConsensusResult>, Option<Vec<PassReport>>), EngineError> {
        match self.config.confidence_mode {
            ConfidenceMode::Consensus => {
                let answers: Vec<AnswerKey> =
                    candidates.iter().map(|c| c.answer.clone()).collect();
                let result = consensus(&answers, candidates.len())
                    .map_err(|source| EngineError::Confidence { stage: stage_no, source })?;
                let verdict = decide_consensus(&result, stage.threshold, self.config.comparator);
                Ok((verdict, Some(result), None))
            }
            ConfidenceMode::PassBased => {
                if self.task.tests.is_empty() {
                    return Err(EngineError::PassBasedWithoutTests {
                        task: self.task.id.clone(),
                    });
                }
                let reports = self.evaluate_candidates(candidates).await?;
                let verdict = decide_pass_based(candidates, &reports, &mut self.rng)
                    .map_err(|source| EngineError::Confidence { stage: stage_no, source })?;
                Ok((verdict, None, Some(reports)))
            }
            ConfidenceMode::Perplexity => {
                let threshold = self
                    .config
                    .perplexity_threshold
                    .expect("validated configs carry a perplexity threshold");
                let verdict = decide_perplexity(candidates, threshold)
                    .map_err(|source| EngineError::Confidence { stage: stage_no, source })?;
                Ok((verdict, None, None))
            }
        }
    }

    // Runs every candidate's program against the visible tests, off the
    // async threads.
    async fn evaluate_candidates(
        &self,
        candidates: &[Candidate],
    ) -> Result<Vec<PassReport>, EngineError> {
        let programs: Vec<String> =
            candidates.iter().map(|c| extract_code_block(&c.text)).collect();
        let tests = self.task.tests.clone();
        let limits = self.options.eval_limits;
        let reports = tokio::task::spawn_blocking(move || {
            programs
                .iter()
                .map(|program| run_code_tests(program, &tests, &limits))
                .collect::<Result<Vec<_>, _>>()
        })
        .await
        .expect("evaluation thread panicked")?;
        Ok(reports)
    }

    // Which sample's plan an escalating plan-per-sample stage carries.
    fn pick_carried_index(
        &mut self,
        candidates: &[Candidate],
        consensus_result: Option<&ConsensusResult>,
        pass_reports: Option<&[PassReport]>,
    ) -> usize {
        match self.config.confidence_mode {
            ConfidenceMode::Consensus => {
                let pool =
                    &consensus_result.expect("consensus runs group answers").supporting_indices;
                pool[self.rng.random_range(0..pool.len())]
            }
            ConfidenceMode::PassBased => {
                let reports = pass_reports.expect("pass-based runs keep reports");
                let counts: Vec<usize> = reports
                    .iter()
                    .map(|r| r.per_test.iter().filter(|t| t.passed).count())
                    .collect();
                let best = *counts.iter().max().expect("nonempty batch");
                let pool: Vec<usize> = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, count)| **count == best)
                    .map(|(i, _)| i)
                    .collect();
                pool[self.rng.random_range(0..pool.len())]
            }
            ConfidenceMode::Perplexity => min_perplexity_index(candidates),
        }
    }
}

fn expect_choices(stage: usize, completion: &Completion, n: usize) -> Result<(), EngineError> {
    if completion.choices.len() == n {
        Ok(())
    } else {
        Err(EngineError::Backend {
            stage,
            source: BackendError::MalformedResponse(format!(
                "expected {n} choice(s), got {}",
                completion.choices.len()
            )),
        })
    }
}

// Index of the lowest-perplexity candidate; earliest wins ties. Candidates
// without logprobs only reach this point after a perplexity verdict already
// validated them, so missing values cannot change the answer here.
fn min_perplexity_index(candidates: &[Candidate]) -> usize {
    let mut best = 0;
    let mut best_ppl = f64::INFINITY;
    for (i, candidate) in candidates.iter().enumerate() {
        if let (Some(sum), Some(count)) = (candidate.logprob_sum, candidate.token_count) {
            if count == 0 {
                continue;
            }
            let ppl = perplexity(sum, count);
            if ppl < best_ppl {
                best = i;
                best_ppl = ppl;
            }
        }
    }
    best
}

// Converts a terminal stage's escalation into the forced acceptance the
// cascade semantics require; the mode's confidence value is kept so reports
// show how weak the forced answer was. The choice is deterministic.
fn force_terminal_accept(
    verdict: Verdict,
    mode: ConfidenceMode,
    candidates: &[Candidate],
    consensus_result: Option<&ConsensusResult>,
    pass_reports: Option<&[PassReport]>,
) -> Verdict {
    if verdict.is_accept() {
        return verdict;
    }
    let confidence = verdict.confidence();
    match mode {
        ConfidenceMode::Consensus => {
            let result = consensus_result.expect("consensus runs group answers");
            Verdict::Accept {
                answer: result.mode_answer.clone(),
                candidate_index: result.supporting_indices[0],
                confidence,
            }
        }
        ConfidenceMode::PassBased => {
            let reports = pass_reports.expect("pass-based runs keep reports");
            let counts: Vec<usize> = reports
                .iter()
                .map(|r| r.per_test.iter().filter(|t| t.passed).count())
                .collect();
            let best = *counts.iter().max().expect("nonempty batch");
            let index = counts.iter().position(|count| *count == best).expect("max exists");
            Verdict::Accept {
                answer: candidates[index].answer.clone(),
                candidate_index: index,
                confidence,
            }
        }
        ConfidenceMode::Perplexity => {
            let index = min_perplexity_index(candidates);
            Verdict::Accept {
                answer: candidates[index].answer.clone(),
                candidate_index: index,
                confidence,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CountingBackend, ModelSpec, ScriptedBackend};
    use crate::costing::PriceEntry;
    use crate::domain::TaskKind;

    fn test_config(seed: u64) -> PipelineConfig {
        let mut config = PipelineConfig::default_three_stage(seed);
        config
            .pricing
            .insert("small-test".to_string(), PriceEntry::priced("0.10", "0.40").unwrap());
        config
            .pricing
            .insert("large-test".to_string(), PriceEntry::priced("2.00", "8.00").unwrap());
        config
    }

    fn math_task(id: &str) -> Task {
        Task {
            id: id.to_string(),
            kind: TaskKind::Math,
            prompt: "Compute 6 * 7.".to_string(),
            gold: Some(Gold::Answer("42".to_string())),
            tests: Vec::new(),
            difficulty_tag: None,
        }
    }

    fn scripted(name: &str, role: Role) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(ModelSpec::local(name, role)))
    }

    fn boxed(answer: &str) -> String {
        format!("Therefore, the final answer is: $\\boxed{{{answer}}}$. I hope it is correct.")
    }

    fn push_stage1(small: &ScriptedBackend, answers: &[&str]) {
        for i in 0..answers.len() {
            small.push_text(format!("plan {i}"));
        }
        for answer in answers {
            small.push_text(boxed(answer));
        }
    }

    #[tokio::test]
    async fn unanimous_first_stage_never_wakes_the_large_model() {
        let small = scripted("small-test", Role::Small);
        let large = scripted("large-test", Role::Large);
        let large_counter = Arc::new(CountingBackend::new(large));
        push_stage1(&small, &["42"; 8]);

        let config = test_config(1);
        let backends = BackendSet::new()
            .with(Role::Small, small.clone())
            .with(Role::Large, large_counter.clone());
        let trace = run_task(&math_task("t1"), 0, &config, &backends, &EngineOptions::default())
            .await
            .unwrap();

        assert_eq!(trace.outcome.resolved_stage, 1);
        assert_eq!(trace.outcome.confidence, 1.0);
        assert_eq!(large_counter.calls(), 0);
        assert_eq!(trace.stages.len(), 1);
        assert_eq!(trace.stages[0].calls.len(), 9);
        assert_eq!(trace.correct, Some(true));
        assert!(trace.outcome.cost.picos() > 0);
        assert!(small.is_exhausted());
    }

    #[tokio::test]
    async fn split_vote_escalates_and_the_guideline_resolves_it() {
        let small = scripted("small-test", Role::Small);
        let large = scripted("large-test", Role::Large);
        // Stage 1: 4/8 for each of two answers, under the 0.75 bar.
        push_stage1(&small, &["42", "41", "42", "41", "42", "41", "42", "41"]);
        // Stage 2: one guideline, then 8 guided samples, 5/8 for 42.
        large.push_text("guideline: multiply carefully");
        for answer in ["42", "42", "42", "41", "42", "41", "42", "41"] {
            small.push_text(boxed(answer));
        }

        let config = test_config(2);
        let backends =
            BackendSet::new().with(Role::Small, small.clone()).with(Role::Large, large.clone());
        let trace = run_task(&math_task("t2"), 0, &config, &backends, &EngineOptions::default())
            .await
            .unwrap();

        assert_eq!(trace.outcome.resolved_stage, 2);
        assert_eq!(trace.stages.len(), 2);
        // The carried goal plan came from a sample that answered 42.
        let carried = trace.stages[0].carried_from_sample.unwrap();
        assert_eq!(carried % 2, 0, "answer 42 came from even samples");
        assert!(trace.stages[0].carried_plan.is_some());
        assert_eq!(trace.stages[1].plans.len(), 1);
        assert!(!trace.stages[1].reused_plan);
        assert_eq!(trace.correct, Some(true));
        assert!(small.is_exhausted() && large.is_exhausted());
    }

    #[tokio::test]
    async fn terminal_stage_accepts_even_garbage() {
        let small = scripted("small-test", Role::Small);
        let large = scripted("large-test", Role::Large);
        // Stage 1: total disagreement.
        push_stage1(&small, &["1", "2", "3", "4", "5", "6", "7", "8"]);
        // Stage 2: guideline plus eight unparseable answers.
        large.push_text("guideline");
        for i in 0..8 {
            small.push_text(format!("I am stumped ({i})"));
        }
        // Stage 3: the large model reuses the guideline and also fails.
        large.push_text("no answer from me either");

        let config = test_config(3);
        let backends =
            BackendSet::new().with(Role::Small, small.clone()).with(Role::Large, large.clone());
        let trace = run_task(&math_task("t3"), 0, &config, &backends, &EngineOptions::default())
            .await
            .unwrap();

        assert_eq!(trace.outcome.resolved_stage, 3);
        assert!(trace.outcome.unresolved_answer);
        assert!(trace.outcome.final_answer.parse_failed);
        assert_eq!(trace.correct, Some(false));
        // Stage 3 reused the stage 2 guideline: no second planner call.
        assert!(trace.stages[2].reused_plan);
        assert!(trace.stages[2].plans.is_empty());
        assert!(large.is_exhausted());
    }

    #[tokio::test]
    async fn exhaustive_mode_runs_every_stage_but_keeps_the_first_acceptance() {
        let build = |exhaustive: bool| async move {
            let small = scripted("small-test", Role::Small);
            let large = scripted("large-test", Role::Large);
            push_stage1(&small, &["42"; 8]);
            if exhaustive {
                large.push_text("guideline");
                for _ in 0..8 {
                    small.push_text(boxed("41"));
                }
                large.push_text(boxed("40"));
            }
            let config = test_config(4);
            let backends =
                BackendSet::new().with(Role::Small, small.clone()).with(Role::Large, large.clone());
            let options = EngineOptions { exhaustive, ..EngineOptions::default() };
            run_task(&math_task("t4"), 0, &config, &backends, &options).await.unwrap()
        };

        let normal = build(false).await;
        let exhaustive = build(true).await;
        assert_eq!(normal.stages.len(), 1);
        assert_eq!(exhaustive.stages.len(), 3);
        assert_eq!(normal.outcome.resolved_stage, 1);
        assert_eq!(exhaustive.outcome.resolved_stage, 1);
        assert_eq!(normal.outcome.final_answer.raw, exhaustive.outcome.final_answer.raw);
        assert!(exhaustive.outcome.cost.picos() > normal.outcome.cost.picos());
    }

    #[tokio::test]
    async fn dataset_runs_isolate_per_task_failures() {
        let small = scripted("small-test", Role::Small);
        let large = scripted("large-test", Role::Large);
        // Enough for the first task only; the second starves and fails.
        push_stage1(&small, &["42"; 8]);

        let config = test_config(5);
        let backends =
            BackendSet::new().with(Role::Small, small.clone()).with(Role::Large, large.clone());
        let tasks = vec![math_task("ok"), math_task("starved")];
        let options = RunOptions { parallelism: 1, ..RunOptions::default() };
        let result = run_dataset(&tasks, &config, &backends, &options).await.unwrap();

        assert_eq!(result.traces.len(), 1);
        assert_eq!(result.failures.len(), 1);
        assert_eq!(result.traces[0].task.id, "ok");
        assert_eq!(result.failures[0].task_id, "starved");
        assert!(result.failures[0].error.contains("exhausted"));
        assert_eq!(result.ledger.total(), result.traces[0].outcome.cost);
    }

    #[tokio::test]
    async fn ledger_totals_match_outcome_costs_at_any_parallelism() {
        let run_with = |parallelism: usize| async move {
            let small = scripted("small-test", Role::Small);
            let large = scripted("large-test", Role::Large);
            for _ in 0..3 {
                push_stage1(&small, &["42"; 8]);
            }
            let config = test_config(6);
            let backends =
                BackendSet::new().with(Role::Small, small.clone()).with(Role::Large, large.clone());
            let tasks = vec![math_task("a"), math_task("b"), math_task("c")];
            let options = RunOptions { parallelism, ..RunOptions::default() };
            run_dataset(&tasks, &config, &backends, &options).await.unwrap()
        };

        let serial = run_with(1).await;
        let parallel = run_with(8).await;
        assert_eq!(serial.ledger.total(), parallel.ledger.total());
        assert_eq!(serial.ledger.entries(), parallel.ledger.entries());
    }
}
