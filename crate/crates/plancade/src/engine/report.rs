//! Run summaries: the aggregate report, the per-task table, and the output
//! files a run leaves behind.
//!
//! Output bytes are a pure function of the run result. Nothing here reads
//! the clock or any other ambient state, which is what makes replayed runs
//! reproducible file-for-file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::costing::{Money, PerMillion};
use crate::domain::ConfidenceMode;

use super::prompts::PROMPT_TEMPLATE_VERSION;
use super::{transcript, RunResult, TaskFailure, TaskTrace};

/// One row of the per-task results table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub kind: String,
    pub resolved_stage: usize,
    pub confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub cost: Money,
    pub unresolved_answer: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difficulty_tag: Option<String>,
}

/// Aggregate summary of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    /// Digest of the resolved configuration the run used.
    pub config_digest: String,
    pub prompt_template_version: String,
    pub rng_seed: i64,
    pub confidence_mode: ConfidenceMode,
    /// Finished tasks.
    pub task_count: usize,
    /// Tasks that errored out.
    pub failure_count: usize,
    /// Finished tasks that carried gold and were scored.
    pub scored_count: usize,
    pub correct_count: usize,
    /// `correct / scored`, absent when nothing was scored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Finished tasks resolved at each 1-based stage.
    pub resolved_by_stage: BTreeMap<usize, usize>,
    /// Terminal acceptances of unparseable answers.
    pub unresolved_answers: usize,
    pub total_cost: Money,
    /// Cost scaled to a million tasks, rendered in dollars.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_per_million_tasks: Option<String>,
    /// True when the per-million figure is exact rather than rounded.
    pub cost_per_million_exact: bool,
    /// True when any call's token usage was estimated, tainting cost
    /// exactness guarantees.
    pub any_usage_estimated: bool,
    pub tasks: Vec<TaskRow>,
    pub failures: Vec<TaskFailure>,
}

impl RunReport {
    pub fn build(
        config: &PipelineConfig,
        traces: &[TaskTrace],
        failures: &[TaskFailure],
        ledger: &crate::costing::CostLedger,
    ) -> Self {
        let mut resolved_by_stage = BTreeMap::new();
        for stage in 1..=config.stages.len() {
            resolved_by_stage.insert(stage, 0usize);
        }
        let mut scored_count = 0;
        let mut correct_count = 0;
        let mut unresolved_answers = 0;
        let mut tasks = Vec::with_capacity(traces.len());
        for trace in traces {
            *resolved_by_stage.entry(trace.outcome.resolved_stage).or_insert(0) += 1;
            if let Some(correct) = trace.correct {
                scored_count += 1;
                correct_count += usize::from(correct);
            }
            unresolved_answers += usize::from(trace.outcome.unresolved_answer);
            tasks.push(TaskRow {
                task_id: trace.task.id.clone(),
                kind: trace.task.kind.to_string(),
                resolved_stage: trace.outcome.resolved_stage,
                confidence: trace.outcome.confidence,
                correct: trace.correct,
                cost: trace.outcome.cost,
                unresolved_answer: trace.outcome.unresolved_answer,
                difficulty_tag: trace.task.difficulty_tag.clone(),
            });
        }
        let per_million =
            (!traces.is_empty()).then(|| PerMillion::new(ledger.total(), traces.len() as u64));
        RunReport {
            config_digest: config.digest(),
            prompt_template_version: PROMPT_TEMPLATE_VERSION.to_string(),
            rng_seed: config.rng_seed as i64,
            confidence_mode: config.confidence_mode,
            task_count: traces.len(),
            failure_count: failures.len(),
            scored_count,
            correct_count,
            accuracy: (scored_count > 0).then(|| correct_count as f64 / scored_count as f64),
            resolved_by_stage,
            unresolved_answers,
            total_cost: ledger.total(),
            cost_per_million_tasks: per_million.map(|p| p.to_string()),
            cost_per_million_exact: per_million.is_some_and(|p| p.is_exact()),
            any_usage_estimated: ledger.any_estimated(),
            tasks,
            failures: failures.to_vec(),
        }
    }
}

/// Writes the per-task table as CSV.
pub fn export_tasks_csv<W: Write>(rows: &[TaskRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "task_id,kind,resolved_stage,confidence,correct,cost_usd,unresolved_answer,difficulty_tag"
    )?;
    for row in rows {
        let correct = match row.correct {
            Some(true) => "true",
            Some(false) => "false",
            None => "",
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.task_id,
            row.kind,
            row.resolved_stage,
            row.confidence,
            correct,
            row.cost,
            row.unresolved_answer,
            row.difficulty_tag.as_deref().unwrap_or(""),
        )?;
    }
    Ok(())
}

/// Writes the four run output files into `dir`: `report.json`, `tasks.csv`,
/// `ledger.csv`, and `transcripts.jsonl`.
pub fn write_outputs(dir: &Path, result: &RunResult) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut report_json = serde_json::to_string_pretty(&result.report)?;
    report_json.push('\n');
    std::fs::write(dir.join("report.json"), report_json)?;

    let mut tasks_csv = Vec::new();
    export_tasks_csv(&result.report.tasks, &mut tasks_csv)?;
    std::fs::write(dir.join("tasks.csv"), tasks_csv)?;

    let mut ledger_csv = Vec::new();
    result.ledger.export_csv(&mut ledger_csv)?;
    std::fs::write(dir.join("ledger.csv"), ledger_csv)?;

    let events = transcript::events(
        &result.report.config_digest,
        &result.report.prompt_template_version,
        &result.traces,
        &result.failures,
    );
    let mut transcripts = Vec::new();
    transcript::write_jsonl(&events, &mut transcripts)?;
    std::fs::write(dir.join("transcripts.jsonl"), transcripts)?;
    Ok(())
}
