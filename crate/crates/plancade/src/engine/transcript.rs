//! Run transcripts: a line-per-event JSONL projection of task traces.
//!
//! The transcript is produced after the run from the in-memory traces, in
//! dataset order, so its bytes depend only on the run's inputs and never on
//! scheduling. A replayed run reproduces it exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::confidence::Verdict;
use crate::domain::{Outcome, Plan};

use super::{CallRecord, TaskFailure, TaskTrace};

/// One transcript line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    /// First line of every transcript; later lines belong to tasks.
    RunHeader {
        config_digest: String,
        prompt_template_version: String,
        task_count: usize,
    },
    TaskStart {
        task_id: String,
        task_index: usize,
    },
    Call {
        task_id: String,
        call: CallRecord,
    },
    StageVerdict {
        task_id: String,
        stage: usize,
        verdict: Verdict,
        #[serde(skip_serializing_if = "Option::is_none")]
        carried_plan: Option<Plan>,
        reused_plan: bool,
    },
    TaskOutcome {
        task_id: String,
        outcome: Outcome,
        #[serde(skip_serializing_if = "Option::is_none")]
        correct: Option<bool>,
    },
    TaskFailed {
        task_id: String,
        task_index: usize,
        error: String,
    },
}

/// Flattens traces and failures into the transcript event sequence, merged
/// back into dataset order.
pub fn events(
    config_digest: &str,
    prompt_template_version: &str,
    traces: &[TaskTrace],
    failures: &[TaskFailure],
) -> Vec<TranscriptEvent> {
    let mut events = vec![TranscriptEvent::RunHeader {
        config_digest: config_digest.to_string(),
        prompt_template_version: prompt_template_version.to_string(),
        task_count: traces.len() + failures.len(),
    }];
    let mut t = 0;
    let mut f = 0;
    while t < traces.len() || f < failures.len() {
        let trace_next = traces.get(t).map(|x| x.task_index);
        let failure_next = failures.get(f).map(|x| x.task_index);
        let take_trace = match (trace_next, failure_next) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        if take_trace {
            push_trace_events(&mut events, &traces[t]);
            t += 1;
        } else {
            let failure = &failures[f];
            events.push(TranscriptEvent::TaskFailed {
                task_id: failure.task_id.clone(),
                task_index: failure.task_index,
                error: failure.error.clone(),
            });
            f += 1;
        }
    }
    events
}

fn push_trace_events(events: &mut Vec<TranscriptEvent>, trace: &TaskTrace) {
    let task_id = &trace.task.id;
    events.push(TranscriptEvent::TaskStart {
        task_id: task_id.clone(),
        task_index: trace.task_index,
    });
    for stage in &trace.stages {
        for call in &stage.calls {
            events.push(TranscriptEvent::Call { task_id: task_id.clone(), call: call.clone() });
        }
        events.push(TranscriptEvent::StageVerdict {
            task_id: task_id.clone(),
            stage: stage.stage,
            verdict: stage.verdict.clone(),
            carried_plan: stage.carried_plan.clone(),
            reused_plan: stage.reused_plan,
        });
    }
    events.push(TranscriptEvent::TaskOutcome {
        task_id: task_id.clone(),
        outcome: trace.outcome.clone(),
        correct: trace.correct,
    });
}

/// Writes events as JSON lines.
pub fn write_jsonl<W: Write>(events: &[TranscriptEvent], mut out: W) -> std::io::Result<()> {
    for event in events {
        serde_json::to_writer(&mut out, event)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
