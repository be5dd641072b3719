//! Multi-stage planner/executor model cascade.
//!
//! A cascade routes each task through an ordered list of stages. Early stages
//! use a cheap model to draft plans and candidate solutions; a confidence
//! verdict over the candidates decides whether the stage's answer is accepted
//! or the task escalates to a stronger model. Plans produced along the way are
//! carried forward so later stages build on earlier reasoning instead of
//! starting over. Every model call is priced exactly and recorded, so a run
//! reports both what it answered and what it spent.
//!
//! The crate is organized around a few layers:
//!
//! - [`domain`]: tasks, plans, candidates, stage policies, and pipeline
//!   validation.
//! - [`extraction`]: pulling a comparable answer out of raw model text and
//!   normalizing it to an exact canonical form.
//! - [`confidence`]: the three verdict modes (consensus voting, test-pass
//!   gating, perplexity thresholding).
//! - [`backends`]: model transports, including HTTP, scripted queues, and a
//!   record/replay transcript cache.
//! - [`engine`]: the cascade itself, dataset runs, transcripts, and reports.
//! - [`evaluators`]: gold-answer scoring and sandboxed code test execution.
//! - [`costing`]: exact currency arithmetic, pricing tables, and ledgers.
//! - [`sweep`]: offline threshold/sample-count sweeps over recorded runs.

pub mod backends;
pub mod book;
pub mod confidence;
pub mod config;
pub mod costing;
pub mod dataset;
pub mod domain;
pub mod engine;
pub mod evaluators;
pub mod extraction;
pub mod rng;
pub mod sweep;
pub mod testing;

pub use confidence::{ConsensusResult, Verdict};
pub use config::PipelineConfig;
pub use costing::{CostLedger, Money, PriceEntry};
pub use domain::{
    AnswerKey, Candidate, Comparator, ConfidenceMode, Outcome, Plan, PlanKind, Role, StagePolicy,
    Task, TaskKind, TokenUsage,
};
pub use engine::{
    run_dataset, run_task, BackendSet, EngineOptions, RunOptions, RunReport, RunResult, TaskTrace,
};
pub use evaluators::PassReport;
