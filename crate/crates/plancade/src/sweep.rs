//! Offline threshold and sample-count sweeps over recorded runs.
//!
//! The expensive part of tuning a cascade is sampling the models. Once a
//! run has been recorded exhaustively (every stage executed for every
//! task), the accept-or-escalate decision is pure arithmetic over the
//! recorded samples, so an entire grid of thresholds, sample counts, and
//! stage subsets can be evaluated without a single model call.
//!
//! [`replay_exhaustive`] produces the recorded material: it replays a
//! transcript cache through the full engine with every stage forced to
//! run. [`sweep`] then re-decides each grid point from the per-stage
//! artifacts alone.
//!
//! Costs are re-estimated per grid point. A call that returned more
//! choices than a grid point consumes is prorated by the consumed
//! fraction, and single-choice executor calls beyond the consumed sample
//! count are dropped entirely. Stage-subset rows keep the recorded
//! prompts, so they estimate what skipping a stage would cost and decide,
//! not what a re-prompted pipeline would have sampled.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::backends::ReplayBackend;
use crate::backends::TranscriptCache;
use crate::confidence::{consensus, decide_consensus, ConfidenceError, Verdict};
use crate::config::PipelineConfig;
use crate::costing::{Money, PerMillion};
use crate::domain::{AnswerKey, ConfidenceMode, Gold, Task};
use crate::engine::{
    run_dataset, BackendSet, CallPurpose, CallRecord, EngineError, EngineOptions, RunOptions,
    RunResult, TaskTrace,
};
use crate::evaluators::score_math;

/// Which pipeline stages a sweep row keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSubset {
    /// Every configured stage.
    Full,
    /// The first two stages, with the second forced to accept.
    FirstTwo,
    /// The last two stages, skipping straight past the first.
    LastTwo,
}

impl StageSubset {
    /// One-based stage numbers this subset runs, for a pipeline of
    /// `stage_count` stages.
    pub fn stage_numbers(self, stage_count: usize) -> Vec<usize> {
        let all: Vec<usize> = (1..=stage_count).collect();
        match self {
            StageSubset::Full => all,
            StageSubset::FirstTwo => all.into_iter().take(2).collect(),
            StageSubset::LastTwo => {
                let skip = stage_count.saturating_sub(2);
                all.into_iter().skip(skip).collect()
            }
        }
    }

    /// Short label used in tables and CSV, like `s1+s2+s3`.
    pub fn label(self, stage_count: usize) -> String {
        let names: Vec<String> =
            self.stage_numbers(stage_count).iter().map(|s| format!("s{s}")).collect();
        names.join("+")
    }
}

/// The grid of settings a sweep evaluates, one row per combination.
#[derive(Clone, Debug)]
pub struct SweepGrid {
    /// Acceptance thresholds tried for the first stage.
    pub tau1: Vec<f64>,
    /// Acceptance thresholds tried for every later non-terminal stage.
    pub tau2: Vec<f64>,
    /// Sample-count prefixes tried, `None` meaning the recorded count.
    pub sample_counts: Option<Vec<usize>>,
    /// Stage subsets tried.
    pub stage_subsets: Vec<StageSubset>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            tau1: vec![0.5, 0.75],
            tau2: vec![0.5, 0.75],
            sample_counts: None,
            stage_subsets: vec![StageSubset::Full],
        }
    }
}

/// One grid point's outcome over the whole dataset.
#[derive(Clone, Debug)]
pub struct SweepRow {
    /// Stage-subset label, like `s1+s2`.
    pub stages: String,
    /// Sample-count prefix this row consumed per multi-sample stage.
    pub num_samples: usize,
    pub tau1: f64,
    pub tau2: f64,
    /// How many tasks each stage resolved, keyed by stage number.
    pub resolved_by_stage: BTreeMap<usize, usize>,
    pub task_count: usize,
    /// Tasks with a reference answer to score against.
    pub scored_count: usize,
    pub correct_count: usize,
    pub accuracy: Option<f64>,
    /// Scored tasks resolved by a vote clearing its threshold, as opposed
    /// to the forced acceptance at the subset's last stage.
    pub consensus_resolved_count: usize,
    pub consensus_correct_count: usize,
    /// Accuracy among consensus-resolved tasks.
    pub accuracy_at_consensus: Option<f64>,
    pub total_cost: Money,
    /// Exact cost per million tasks, when there are tasks.
    pub cost_per_million: Option<PerMillion>,
}

/// All rows of a sweep, in grid order.
#[derive(Clone, Debug, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweeps re-decide recorded votes, which requires consensus confidence, not {0}")]
    NotConsensus(ConfidenceMode),
    #[error("sweep grid has no values for {0}")]
    EmptyGrid(&'static str),
    #[error("sample count {requested} exceeds the {available} recorded per stage")]
    BadSampleCount { requested: usize, available: usize },
    #[error("task {task_id} stage {stage} recorded {have} candidate(s), fewer than the {requested} the grid asks for")]
    InsufficientSamples { task_id: String, stage: usize, have: usize, requested: usize },
    #[error("task {task_id} has no recorded artifacts for stage {stage}; sweeps need an exhaustive run")]
    MissingStage { task_id: String, stage: usize },
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
}

/// Replays a recorded transcript cache through the engine with every stage
/// forced to run, producing the exhaustive traces a sweep needs. No
/// network is involved; a request absent from the cache is an error.
pub async fn replay_exhaustive(
    tasks: &[Task],
    config: &PipelineConfig,
    cache: Arc<TranscriptCache>,
) -> Result<RunResult, EngineError> {
    let mut backends = BackendSet::new();
    for (role, spec) in &config.models {
        backends.insert(*role, Arc::new(ReplayBackend::new(spec.clone(), cache.clone())));
    }
    let options = RunOptions {
        engine: EngineOptions { exhaustive: true, ..EngineOptions::default() },
        ..RunOptions::default()
    };
    run_dataset(tasks, config, &backends, &options).await
}

/// Evaluates every grid point against exhaustive traces, without touching
/// any backend.
pub fn sweep(
    config: &PipelineConfig,
    traces: &[TaskTrace],
    grid: &SweepGrid,
) -> Result<SweepTable, SweepError> {
    if config.confidence_mode != ConfidenceMode::Consensus {
        return Err(SweepError::NotConsensus(config.confidence_mode));
    }
    if grid.tau1.is_empty() {
        return Err(SweepError::EmptyGrid("tau1"));
    }
    if grid.tau2.is_empty() {
        return Err(SweepError::EmptyGrid("tau2"));
    }
    if grid.stage_subsets.is_empty() {
        return Err(SweepError::EmptyGrid("stage subsets"));
    }
    let recorded_samples = config.stages.iter().map(|s| s.num_samples).max().unwrap_or(1);
    let sample_counts = match &grid.sample_counts {
        Some(counts) if counts.is_empty() => return Err(SweepError::EmptyGrid("sample counts")),
        Some(counts) => counts.clone(),
        None => vec![recorded_samples],
    };
    for &count in &sample_counts {
        if count == 0 || count > recorded_samples {
            return Err(SweepError::BadSampleCount {
                requested: count,
                available: recorded_samples,
            });
        }
    }
    let stage_count = config.stages.len();
    let max_requested = sample_counts.iter().copied().max().unwrap_or(1);
    for trace in traces {
        for stage_no in 1..=stage_count {
            let Some(artifacts) = trace.stages.iter().find(|s| s.stage == stage_no) else {
                return Err(SweepError::MissingStage {
                    task_id: trace.task.id.clone(),
                    stage: stage_no,
                });
            };
            // Single-sample stages legitimately record one candidate; only
            // stages meant to vote must cover the grid's largest prefix.
            if config.stages[stage_no - 1].num_samples > 1
                && artifacts.candidates.len() < max_requested
            {
                return Err(SweepError::InsufficientSamples {
                    task_id: trace.task.id.clone(),
                    stage: stage_no,
                    have: artifacts.candidates.len(),
                    requested: max_requested,
                });
            }
        }
    }

    let mut rows = Vec::new();
    for &subset in &grid.stage_subsets {
        let stage_numbers = subset.stage_numbers(stage_count);
        for &num_samples in &sample_counts {
            for &tau1 in &grid.tau1 {
                for &tau2 in &grid.tau2 {
                    rows.push(evaluate_point(
                        config,
                        traces,
                        subset,
                        &stage_numbers,
                        num_samples,
                        tau1,
                        tau2,
                    )?);
                }
            }
        }
    }
    Ok(SweepTable { rows })
}

fn evaluate_point(
    config: &PipelineConfig,
    traces: &[TaskTrace],
    subset: StageSubset,
    stage_numbers: &[usize],
    num_samples: usize,
    tau1: f64,
    tau2: f64,
) -> Result<SweepRow, SweepError> {
    let stage_count = config.stages.len();
    let mut resolved_by_stage: BTreeMap<usize, usize> = BTreeMap::new();
    for &stage_no in stage_numbers {
        resolved_by_stage.insert(stage_no, 0);
    }
    let mut total_picos: i128 = 0;
    let mut scored_count = 0usize;
    let mut correct_count = 0usize;
    let mut consensus_resolved_count = 0usize;
    let mut consensus_correct_count = 0usize;
    for trace in traces {
        let mut resolution: Option<(usize, AnswerKey, bool)> = None;
        for (position, &stage_no) in stage_numbers.iter().enumerate() {
            let artifacts = trace
                .stages
                .iter()
                .find(|s| s.stage == stage_no)
                .expect("stage presence was validated");
            let n_eff = num_samples.min(artifacts.candidates.len());
            total_picos += prorated_stage_picos(&artifacts.calls, n_eff);
            let answers: Vec<AnswerKey> =
                artifacts.candidates[..n_eff].iter().map(|c| c.answer.clone()).collect();
            let vote = consensus(&answers, n_eff)?;
            let last = position + 1 == stage_numbers.len();
            if last {
                resolution = Some((stage_no, vote.mode_answer.clone(), false));
                break;
            }
            let threshold = if stage_no == 1 { tau1 } else { tau2 };
            let verdict = decide_consensus(&vote, threshold, config.comparator);
            if let Verdict::Accept { answer, .. } = verdict {
                resolution = Some((stage_no, answer, true));
                break;
            }
        }
        let (stage_no, answer, by_consensus) =
            resolution.expect("the last subset stage always resolves");
        *resolved_by_stage.get_mut(&stage_no).expect("stage keys were pre-seeded") += 1;
        if let Some(Gold::Answer(gold)) = &trace.task.gold {
            scored_count += 1;
            let correct = score_math(&answer, gold);
            if correct {
                correct_count += 1;
            }
            if by_consensus {
                consensus_resolved_count += 1;
                if correct {
                    consensus_correct_count += 1;
                }
            }
        }
    }
    let task_count = traces.len();
    let total_cost = Money::from_picos(total_picos);
    Ok(SweepRow {
        stages: subset.label(stage_count),
        num_samples,
        tau1,
        tau2,
        resolved_by_stage,
        task_count,
        scored_count,
        correct_count,
        accuracy: if scored_count > 0 {
            Some(correct_count as f64 / scored_count as f64)
        } else {
            None
        },
        consensus_resolved_count,
        consensus_correct_count,
        accuracy_at_consensus: if consensus_resolved_count > 0 {
            Some(consensus_correct_count as f64 / consensus_resolved_count as f64)
        } else {
            None
        },
        total_cost,
        cost_per_million: if task_count > 0 {
            Some(PerMillion::new(total_cost, task_count as u64))
        } else {
            None
        },
    })
}

/// What a stage's recorded calls would have cost with only `n_eff` samples
/// consumed.
///
/// Multi-choice calls are prorated by `n_eff / num_choices` because both
/// request and generation scale with the choice count. Single-choice
/// executor calls are per-sample, so only the first `n_eff` of them count.
/// Everything else, like a single-choice planner call, is kept whole.
fn prorated_stage_picos(calls: &[CallRecord], n_eff: usize) -> i128 {
    let mut total: i128 = 0;
    let mut singleton_executors_seen = 0usize;
    for call in calls {
        let picos = call.cost.picos();
        total += if call.purpose == CallPurpose::Executor && call.num_choices == 1 {
            singleton_executors_seen += 1;
            if singleton_executors_seen <= n_eff {
                picos
            } else {
                0
            }
        } else if call.num_choices > 1 && n_eff < call.num_choices {
            picos * n_eff as i128 / call.num_choices as i128
        } else {
            picos
        };
    }
    total
}

impl SweepTable {
    /// Rows as CSV with a header, stage columns keyed by stage number.
    pub fn to_csv(&self) -> String {
        let stage_numbers = self.stage_number_union();
        let mut out = String::from("stages,num_samples,tau1,tau2");
        for stage_no in &stage_numbers {
            out.push_str(&format!(",resolved_s{stage_no}"));
        }
        out.push_str(
            ",tasks,scored,correct,accuracy,consensus_resolved,consensus_correct,accuracy_at_consensus,total_cost_usd,cost_per_million_tasks\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                row.stages, row.num_samples, row.tau1, row.tau2
            ));
            for stage_no in &stage_numbers {
                let resolved = row.resolved_by_stage.get(stage_no).copied().unwrap_or(0);
                out.push_str(&format!(",{resolved}"));
            }
            out.push_str(&format!(
                ",{},{},{},{},{},{},{},{},{}\n",
                row.task_count,
                row.scored_count,
                row.correct_count,
                row.accuracy.map_or(String::new(), |a| format!("{a:.4}")),
                row.consensus_resolved_count,
                row.consensus_correct_count,
                row.accuracy_at_consensus.map_or(String::new(), |a| format!("{a:.4}")),
                row.total_cost,
                row.cost_per_million.as_ref().map_or(String::new(), |p| p.to_string()),
            ));
        }
        out
    }

    fn stage_number_union(&self) -> Vec<usize> {
        let mut numbers: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|row| row.resolved_by_stage.keys().copied())
            .collect();
        numbers.sort_unstable();
        numbers.dedup();
        numbers
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage_numbers = self.stage_number_union();
        write!(f, "{:<10} {:>4} {:>6} {:>6}", "stages", "n", "tau1", "tau2")?;
        for stage_no in &stage_numbers {
            write!(f, " {:>6}", format!("@s{stage_no}"))?;
        }
        writeln!(f, " {:>9} {:>9} {:>14}", "accuracy", "acc@cons", "cost_usd")?;
        for row in &self.rows {
            write!(
                f,
                "{:<10} {:>4} {:>6} {:>6}",
                row.stages, row.num_samples, row.tau1, row.tau2
            )?;
            for stage_no in &stage_numbers {
                write!(f, " {:>6}", row.resolved_by_stage.get(stage_no).copied().unwrap_or(0))?;
            }
            let accuracy =
                row.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let at_consensus = row
                .accuracy_at_consensus
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            writeln!(f, " {accuracy:>9} {at_consensus:>9} {:>14}", row.total_cost.to_string())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{corpus, fixture_config};

    async fn exhaustive_traces() -> (PipelineConfig, Vec<TaskTrace>) {
        let config = fixture_config();
        let fixture = corpus();
        let backends = BackendSet::new()
            .with(crate::domain::Role::Small, fixture.small.clone())
            .with(crate::domain::Role::Large, fixture.large.clone());
        let options = RunOptions {
            engine: EngineOptions { exhaustive: true, ..EngineOptions::default() },
            ..RunOptions::default()
        };
        let result = run_dataset(&fixture.tasks, &config, &backends, &options).await.unwrap();
        assert!(result.failures.is_empty(), "{:?}", result.failures);
        (config, result.traces)
    }

    #[tokio::test]
    async fn default_grid_matches_the_live_decision_boundaries() {
        let (config, traces) = exhaustive_traces().await;
        let table = sweep(&config, &traces, &SweepGrid::default()).unwrap();
        assert_eq!(table.rows.len(), 4);
        let row = |t1: f64, t2: f64| {
            table
                .rows
                .iter()
                .find(|r| r.tau1 == t1 && r.tau2 == t2)
                .unwrap_or_else(|| panic!("no row for tau1={t1} tau2={t2}"))
        };
        // The recorded defaults: strict first-stage gate, lenient second.
        let defaults = row(0.75, 0.5);
        assert_eq!(defaults.resolved_by_stage[&1], 24);
        assert_eq!(defaults.resolved_by_stage[&2], 26);
        assert_eq!(defaults.resolved_by_stage[&3], 0);
        assert_eq!(defaults.correct_count, 50);
        // Loosening the first gate accepts the mid-band buckets early.
        assert_eq!(row(0.5, 0.5).resolved_by_stage[&1], 38);
        // Tightening the second gate pushes the hard tail to the terminal
        // stage, which answers two of those tasks wrongly.
        let strict = row(0.75, 0.75);
        assert_eq!(strict.resolved_by_stage[&3], 12);
        assert_eq!(strict.correct_count, 48);
    }

    #[tokio::test]
    async fn cost_never_decreases_when_thresholds_tighten() {
        let (config, traces) = exhaustive_traces().await;
        let table = sweep(&config, &traces, &SweepGrid::default()).unwrap();
        let cost = |t1: f64, t2: f64| {
            table
                .rows
                .iter()
                .find(|r| r.tau1 == t1 && r.tau2 == t2)
                .unwrap()
                .total_cost
                .picos()
        };
        assert!(cost(0.75, 0.5) >= cost(0.5, 0.5));
        assert!(cost(0.5, 0.75) >= cost(0.5, 0.5));
        assert!(cost(0.75, 0.75) >= cost(0.75, 0.5));
        assert!(cost(0.75, 0.75) >= cost(0.5, 0.75));
    }

    #[tokio::test]
    async fn smaller_sample_prefixes_cost_less_and_score_no_better() {
        let (config, traces) = exhaustive_traces().await;
        let grid = SweepGrid { sample_counts: Some(vec![4, 8]), ..SweepGrid::default() };
        let table = sweep(&config, &traces, &grid).unwrap();
        assert_eq!(table.rows.len(), 8);
        for row8 in table.rows.iter().filter(|r| r.num_samples == 8) {
            let row4 = table
                .rows
                .iter()
                .find(|r| r.num_samples == 4 && r.tau1 == row8.tau1 && r.tau2 == row8.tau2)
                .unwrap();
            assert!(row4.total_cost.picos() < row8.total_cost.picos());
            assert!(row4.correct_count <= row8.correct_count);
            // Bigger votes are better votes: conditional accuracy among the
            // consensus-resolved tasks never drops as samples are added.
            assert!(
                row4.accuracy_at_consensus.unwrap() <= row8.accuracy_at_consensus.unwrap(),
                "tau1={} tau2={}: {:?} > {:?}",
                row8.tau1,
                row8.tau2,
                row4.accuracy_at_consensus,
                row8.accuracy_at_consensus
            );
        }
        // With four samples the mid-band bucket ties on a wrong answer and
        // the lenient gate accepts it.
        let lenient4 = table
            .rows
            .iter()
            .find(|r| r.num_samples == 4 && r.tau1 == 0.5 && r.tau2 == 0.5)
            .unwrap();
        assert_eq!(lenient4.correct_count, 42);
    }

    #[tokio::test]
    async fn truncated_subsets_force_their_last_stage_and_cost_less() {
        let (config, traces) = exhaustive_traces().await;
        let grid = SweepGrid {
            stage_subsets: vec![StageSubset::Full, StageSubset::FirstTwo],
            ..SweepGrid::default()
        };
        let table = sweep(&config, &traces, &grid).unwrap();
        for short in table.rows.iter().filter(|r| r.stages == "s1+s2") {
            assert!(!short.resolved_by_stage.contains_key(&3));
            let full = table
                .rows
                .iter()
                .find(|r| r.stages == "s1+s2+s3" && r.tau1 == short.tau1 && r.tau2 == short.tau2)
                .unwrap();
            assert!(short.total_cost.picos() <= full.total_cost.picos());
            assert_eq!(
                short.resolved_by_stage[&1] + short.resolved_by_stage[&2],
                short.task_count
            );
        }
        // The second stage is terminal in the truncated rows, so tau2 is
        // irrelevant to them.
        let short_rows: Vec<_> = table.rows.iter().filter(|r| r.stages == "s1+s2").collect();
        for row in &short_rows {
            let sibling = short_rows
                .iter()
                .find(|r| r.tau1 == row.tau1 && r.tau2 != row.tau2)
                .unwrap();
            assert_eq!(row.resolved_by_stage, sibling.resolved_by_stage);
            assert_eq!(row.correct_count, sibling.correct_count);
            assert_eq!(row.total_cost.picos(), sibling.total_cost.picos());
        }
    }

    #[tokio::test]
    async fn sweeps_refuse_non_consensus_modes_and_bad_grids() {
        let (mut config, traces) = exhaustive_traces().await;
        let bad_n = SweepGrid { sample_counts: Some(vec![9]), ..SweepGrid::default() };
        assert!(matches!(
            sweep(&config, &traces, &bad_n),
            Err(SweepError::BadSampleCount { requested: 9, available: 8 })
        ));
        let empty = SweepGrid { tau1: Vec::new(), ..SweepGrid::default() };
        assert!(matches!(sweep(&config, &traces, &empty), Err(SweepError::EmptyGrid("tau1"))));
        config.confidence_mode = ConfidenceMode::PassBased;
        assert!(matches!(
            sweep(&config, &traces, &SweepGrid::default()),
            Err(SweepError::NotConsensus(_))
        ));
    }

    #[tokio::test]
    async fn partial_traces_are_rejected() {
        let (config, mut traces) = exhaustive_traces().await;
        traces[0].stages.retain(|s| s.stage != 3);
        let err = sweep(&config, &traces, &SweepGrid::default()).unwrap_err();
        assert!(matches!(err, SweepError::MissingStage { stage: 3, .. }));
    }

    #[tokio::test]
    async fn under_recorded_voting_stages_are_rejected() {
        let (config, mut traces) = exhaustive_traces().await;
        traces[7].stages[0].candidates.truncate(3);
        let err = sweep(&config, &traces, &SweepGrid::default()).unwrap_err();
        assert!(matches!(
            err,
            SweepError::InsufficientSamples { stage: 1, have: 3, requested: 8, .. }
        ));
    }

    #[test]
    fn csv_has_one_line_per_row_plus_header() {
        let table = SweepTable {
            rows: vec![SweepRow {
                stages: "s1+s2+s3".to_string(),
                num_samples: 8,
                tau1: 0.75,
                tau2: 0.5,
                resolved_by_stage: BTreeMap::from([(1, 24), (2, 26), (3, 0)]),
                task_count: 50,
                scored_count: 50,
                correct_count: 50,
                accuracy: Some(1.0),
                consensus_resolved_count: 50,
                consensus_correct_count: 50,
                accuracy_at_consensus: Some(1.0),
                total_cost: Money::from_picos(1_500_000),
                cost_per_million: None,
            }],
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("stages,num_samples,tau1,tau2,resolved_s1"));
        assert!(lines[1].starts_with("s1+s2+s3,8,0.75,0.5,24,26,0,50,50,50,1.0000,50,50,1.0000,"));
    }
}
