//! Prompt assembly for planner and executor calls.
//!
//! Prompts are deterministic functions of the task, the carried plans, and
//! the stage policy. They are versioned: anything that changes a rendered
//! prompt byte changes request hashes, which invalidates recorded
//! transcripts, so bump [`PROMPT_TEMPLATE_VERSION`] whenever templates move.

use crate::domain::{Plan, PlanKind, Role, StagePolicy, Task, TaskKind};

/// Bumped on any template change; recorded in run reports so replays can
/// detect a template drift instead of miscaching.
pub const PROMPT_TEMPLATE_VERSION: &str = "1";

/// Answer-format contract appended to every executor prompt, per task kind.
/// The math form is load-bearing: answer extraction looks for the boxed
/// marker this sentence instructs the model to emit.
pub fn answer_format_instruction(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Math => {
            "Show your reasoning, then end with exactly this sentence, filling in the answer: \
             Therefore, the final answer is: $\\boxed{answer}$. I hope it is correct."
        }
        TaskKind::Code => {
            "Reply with a single complete Python program inside one fenced code block \
             (```python ... ```). Define exactly the function the task asks for. \
             Do not print anything or include usage examples."
        }
        TaskKind::DecisionStep => {
            "Think step by step, then put your chosen action alone on the final line, \
             with no label, prefix, or punctuation around it."
        }
        TaskKind::OpenEnded => {
            "Give your complete answer directly. Do not add closing pleasantries."
        }
    }
}

/// System prompt for a planner call.
pub fn planner_system(kind: PlanKind) -> String {
    match kind {
        PlanKind::Goal => "You are a planning assistant. Read the task and state the goal to \
                           pursue and the key steps to get there. Be concise: a short paragraph \
                           or a few numbered steps. Do not solve the task."
            .to_string(),
        PlanKind::Guideline => "You are an expert advisor. Read the task and the earlier plan, \
                                then write an improved guideline for solving the task: correct \
                                any missteps in the plan, name the method to use, and call out \
                                pitfalls. Do not solve the task."
            .to_string(),
    }
}

/// User prompt for a planner call. Guideline planners see the earlier goal
/// plan when one was carried forward.
pub fn planner_user(task: &Task, kind: PlanKind, carried: Option<&Plan>) -> String {
    let mut prompt = format!("Task:\n{}\n", task.prompt);
    if kind == PlanKind::Guideline {
        if let Some(plan) = carried {
            prompt.push_str(&format!("\nEarlier plan:\n{}\n", plan.text));
        }
    }
    prompt.push_str(match kind {
        PlanKind::Goal => "\nState the goal and key steps.",
        PlanKind::Guideline => "\nWrite the guideline.",
    });
    prompt
}

/// System prompt for an executor call.
pub fn executor_system(kind: TaskKind) -> String {
    let preamble = match kind {
        TaskKind::Math => "You are a careful mathematician. Solve the problem.",
        TaskKind::Code => "You are a careful Python programmer. Solve the problem.",
        TaskKind::DecisionStep => "You are a careful decision maker. Choose the next action.",
        TaskKind::OpenEnded => "You are a careful assistant. Answer the question.",
    };
    format!("{preamble} {}", answer_format_instruction(kind))
}

/// User prompt for an executor call. Plans appear in cascade order, each
/// under a heading naming what it is; a large executor taking over the task
/// sees only the guideline, since the goal plan it would otherwise carry was
/// already folded into that guideline.
pub fn executor_user(task: &Task, stage: &StagePolicy, plans: &[Plan]) -> String {
    let mut prompt = format!("Task:\n{}\n", task.prompt);
    let takeover = stage.planner_role == Role::Large && stage.executor_role == Role::Large;
    for plan in plans {
        if takeover && plan.kind == PlanKind::Goal {
            continue;
        }
        let heading = match plan.kind {
            PlanKind::Goal => "Plan to follow",
            PlanKind::Guideline => "Guideline to follow",
        };
        prompt.push_str(&format!("\n{heading}:\n{}\n", plan.text));
    }
    prompt.push_str("\nSolve the task now.");
    prompt
}
