//! Dataset IO: native task JSONL, plus converters for two common benchmark
//! export layouts.
//!
//! The native format is one serialized [`Task`] per line. Converters turn
//! third-party exports into that format once, up front, so the engine only
//! ever sees validated native tasks.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{Gold, Task, TaskError, TaskKind, TestCase};
use crate::extraction::normalize;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: TaskError },
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
}

/// Loads and validates native-format tasks from a JSONL file.
pub fn load_tasks(path: &Path) -> Result<Vec<Task>, DatasetError> {
    let file = std::fs::File::open(path)?;
    parse_tasks(BufReader::new(file))
}

/// Parses native-format tasks from JSON lines; blank lines are allowed.
pub fn parse_tasks<R: BufRead>(reader: R) -> Result<Vec<Task>, DatasetError> {
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line)
            .map_err(|source| DatasetError::Parse { line: line_no, source })?;
        task.validate().map_err(|source| DatasetError::Invalid { line: line_no, source })?;
        if !seen.insert(task.id.clone()) {
            return Err(DatasetError::DuplicateId(task.id));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Writes tasks in the native JSONL format.
pub fn write_tasks<W: Write>(tasks: &[Task], mut out: W) -> std::io::Result<()> {
    for task in tasks {
        serde_json::to_writer(&mut out, task)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// The result of a conversion: usable tasks plus the records left behind.
pub struct ConvertOutcome {
    pub tasks: Vec<Task>,
    pub skipped: Vec<SkippedRecord>,
}

/// A source record a converter could not turn into a task.
#[derive(Debug)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

// Competition-math export layout: a problem statement and a worked solution
// whose final answer sits in a boxed marker.
#[derive(Deserialize)]
struct BoxedMathRecord {
    problem: String,
    #[serde(default)]
    level: Option<String>,
    solution: String,
}

/// Converts competition-math export records (`problem` / `level` /
/// `solution`) into math tasks. The gold answer is the solution's innermost
/// boxed payload; records without one are skipped, not guessed at.
pub fn convert_math_jsonl<R: BufRead>(
    reader: R,
    id_prefix: &str,
) -> Result<ConvertOutcome, DatasetError> {
    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BoxedMathRecord = serde_json::from_str(&line)
            .map_err(|source| DatasetError::Parse { line: line_no, source })?;
        let gold = crate::extraction::innermost_boxed_payload(&record.solution);
        let Some(gold) = gold else {
            skipped.push(SkippedRecord {
                line: line_no,
                reason: "solution has no boxed final answer".to_string(),
            });
            continue;
        };
        if normalize(gold).parse_failed {
            skipped.push(SkippedRecord {
                line: line_no,
                reason: "boxed final answer does not normalize".to_string(),
            });
            continue;
        }
        tasks.push(Task {
            id: format!("{id_prefix}{line_no}"),
            kind: TaskKind::Math,
            prompt: record.problem,
            gold: Some(Gold::Answer(gold.to_string())),
            tests: Vec::new(),
            difficulty_tag: record.level.as_deref().map(level_tag),
        });
    }
    Ok(ConvertOutcome { tasks, skipped })
}

// Python-benchmark export layout: a prose prompt, reference code, visible
// assertions, and optionally harder held-out assertions.
#[derive(Deserialize)]
struct PythonTestsRecord {
    task_id: u64,
    text: String,
    #[serde(default)]
    test_setup_code: Option<String>,
    #[serde(default)]
    test_list: Vec<String>,
    #[serde(default)]
    challenge_test_list: Vec<String>,
}

/// Converts Python-benchmark export records (`task_id` / `text` /
/// `test_list` / `challenge_test_list`) into code tasks. Visible tests come
/// from `test_list`; gold tests prefer the held-out `challenge_test_list`
/// and fall back to the visible list. The first visible assertion is quoted
/// in the prompt so the model knows the expected signature.
pub fn convert_mbpp_jsonl<R: BufRead>(
    reader: R,
    id_prefix: &str,
) -> Result<ConvertOutcome, DatasetError> {
    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PythonTestsRecord = serde_json::from_str(&line)
            .map_err(|source| DatasetError::Parse { line: line_no, source })?;
        if record.test_list.is_empty() {
            skipped.push(SkippedRecord {
                line: line_no,
                reason: "record has no tests".to_string(),
            });
            continue;
        }
        let setup = record.test_setup_code.as_deref().map(str::trim).filter(|s| !s.is_empty());
        let to_cases = |assertions: &[String]| {
            assertions
                .iter()
                .map(|assertion| match setup {
                    Some(setup) => TestCase::with_setup(assertion.clone(), setup),
                    None => TestCase::new(assertion.clone()),
                })
                .collect::<Vec<_>>()
        };
        let visible = to_cases(&record.test_list);
        let gold = if record.challenge_test_list.is_empty() {
            visible.clone()
        } else {
            to_cases(&record.challenge_test_list)
        };
        let prompt = format!(
            "{}\nYour solution must satisfy calls shaped like this test:\n{}",
            record.text.trim(),
            record.test_list[0]
        );
        tasks.push(Task {
            id: format!("{id_prefix}{}", record.task_id),
            kind: TaskKind::Code,
            prompt,
            gold: Some(Gold::Tests(gold)),
            tests: visible,
            difficulty_tag: None,
        });
    }
    Ok(ConvertOutcome { tasks, skipped })
}

// "Level 3" to "L3"; unrecognized labels pass through unchanged.
fn level_tag(level: &str) -> String {
    match level.trim().strip_prefix("Level ") {
        Some(rest) => format!("L{rest}"),
        None => level.trim().to_string(),
    }
}
