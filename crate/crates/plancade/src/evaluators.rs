//! Scoring answers and executing generated code.
//!
//! Math answers are scored by exact canonical equivalence with the gold
//! reference. Code is scored by running the generated program against test
//! assertions, each in its own child process inside a scratch directory,
//! under OS resource limits (CPU time and address space on Unix) plus a
//! wall-clock kill. A preamble injected ahead of the program disables socket
//! creation and rejects writes outside the scratch directory; that guard
//! catches accidental escapes, while the process boundary and resource
//! limits do the real containment.
//!
//! Verdict-time test runs (visible tests) and scoring-time runs (hidden
//! tests) go through the same entry point but never mix: the engine decides
//! escalation from visible tests only, and final scores never feed back into
//! stage verdicts.

use std::io::Read;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnswerKey, TestCase};
use crate::extraction::{answers_equivalent, normalize};

/// Resource bounds for one test execution.
#[derive(Clone, Copy, Debug)]
pub struct EvalLimits {
    /// Wall-clock budget per test; the child is killed when it expires.
    pub timeout: Duration,
    /// Address-space cap per child, in bytes.
    pub memory_bytes: u64,
}

impl Default for EvalLimits {
    fn default() -> Self {
        EvalLimits { timeout: Duration::from_secs(10), memory_bytes: 512 * 1024 * 1024 }
    }
}

/// One assertion's outcome.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_index: usize,
    pub passed: bool,
    /// Tail of the child's stderr, capped at 2000 characters.
    pub stderr: String,
    pub duration_ms: u64,
    pub timed_out: bool,
}

/// Results of running a program against a test list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub per_test: Vec<TestResult>,
    /// True only when every test passed and none timed out.
    pub all_passed: bool,
    /// True when any test hit the wall-clock limit.
    pub timed_out: bool,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sandbox io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// True when the predicted answer is canonically equivalent to the gold
/// reference. A failed prediction never scores.
pub fn score_math(answer: &AnswerKey, gold: &str) -> bool {
    answers_equivalent(answer, &normalize(gold))
}

const STDERR_CAP: usize = 2000;

// Runs before any untrusted code: blocks socket creation and write-mode
// opens that resolve outside the scratch directory. Best-effort by design;
// the child process plus resource limits carry the enforcement.
const GUARD_PREAMBLE: &str = r#"
import builtins as _builtins, os as _os, socket as _socket

_SCRATCH = _os.path.realpath(_os.getcwd())

def _no_network(*args, **kwargs):
    raise PermissionError("network access is disabled in the evaluation sandbox")

_socket.socket = _no_network
_socket.create_connection = _no_network
_socket.socketpair = _no_network
_socket.create_server = _no_network

_real_open = _builtins.open

def _guarded_open(file, mode="r", *args, **kwargs):
    if not isinstance(file, int) and any(c in mode for c in "wax+"):
        path = _os.path.realpath(_os.fspath(file))
        if path != _SCRATCH and not path.startswith(_SCRATCH + _os.sep):
            raise PermissionError(f"write outside the sandbox scratch directory: {path}")
    return _real_open(file, mode, *args, **kwargs)

_builtins.open = _guarded_open
"#;

/// Executes `program` once per test, each in an isolated child process, and
/// reports per-test outcomes. Tests see the program's definitions plus their
/// own setup preamble; a failure or crash in one test does not disturb the
/// others.
pub fn run_code_tests(
    program: &str,
    tests: &[TestCase],
    limits: &EvalLimits,
) -> Result<PassReport, EvalError> {
    let scratch = tempfile::tempdir()?;
    let mut per_test = Vec::with_capacity(tests.len());
    for (index, test) in tests.iter().enumerate() {
        let mut script = String::from(GUARD_PREAMBLE);
        script.push('\n');
        script.push_str(program);
        script.push('\n');
        if let Some(setup) = &test.setup {
            script.push_str(setup);
            script.push('\n');
        }
        script.push_str(&test.assertion);
        script.push('\n');
        let script_path = scratch.path().join(format!("test_{index}.py"));
        std::fs::write(&script_path, &script)?;
        per_test.push(run_one(index, &script_path, scratch.path(), limits)?);
    }
    let timed_out = per_test.iter().any(|t| t.timed_out);
    let all_passed = !timed_out && per_test.iter().all(|t| t.passed);
    Ok(PassReport { per_test, all_passed, timed_out })
}

fn run_one(
    test_index: usize,
    script: &std::path::Path,
    scratch: &std::path::Path,
    limits: &EvalLimits,
) -> Result<TestResult, EvalError> {
    let mut command = Command::new("python3");
    command
        .arg("-I")
        .arg(script)
        .current_dir(scratch)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    apply_rlimits(&mut command, limits);

    let started = Instant::now();
    let mut child = command.spawn()?;
    let stderr_handle = child.stderr.take().expect("stderr was piped");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let mut stream = stderr_handle;
        let _ = stream.read_to_end(&mut buf);
        buf
    });

    let deadline = started + limits.timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            let _ = child.kill();
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(5));
    };

    let stderr_bytes = reader.join().unwrap_or_default();
    let stderr_full = String::from_utf8_lossy(&stderr_bytes);
    let stderr_tail: String = if stderr_full.chars().count() > STDERR_CAP {
        let skip = stderr_full.chars().count() - STDERR_CAP;
        stderr_full.chars().skip(skip).collect()
    } else {
        stderr_full.into_owned()
    };

    Ok(TestResult {
        test_index,
        passed: !timed_out && status.success(),
        stderr: stderr_tail,
        duration_ms: started.elapsed().as_millis() as u64,
        timed_out,
    })
}

#[cfg(unix)]
fn apply_rlimits(command: &mut Command, limits: &EvalLimits) {
    use std::os::unix::process::CommandExt;

    let cpu_secs = limits.timeout.as_secs().max(1) + 1;
    let memory = limits.memory_bytes;
    unsafe {
        command.pre_exec(move || {
            let cpu = libc::rlimit { rlim_cur: cpu_secs, rlim_max: cpu_secs + 1 };
            libc::setrlimit(libc::RLIMIT_CPU, &cpu);
            let mem = libc::rlimit { rlim_cur: memory, rlim_max: memory };
            libc::setrlimit(libc::RLIMIT_AS, &mem);
            Ok(())
        });
    }
}

#[cfg(not(unix))]
fn apply_rlimits(_command: &mut Command, _limits: &EvalLimits) {
    // Only the wall-clock kill applies on platforms without setrlimit.
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits_ms(ms: u64) -> EvalLimits {
        EvalLimits { timeout: Duration::from_millis(ms), ..EvalLimits::default() }
    }

    fn asserts(list: &[&str]) -> Vec<TestCase> {
        list.iter().map(|a| TestCase::new(*a)).collect()
    }

    #[test]
    fn scores_math_by_canonical_equivalence() {
        assert!(score_math(&normalize("0.5"), "1/2"));
        assert!(score_math(&normalize("\\frac{7}{8}"), "7/8"));
        assert!(!score_math(&normalize("0.5"), "1/3"));
        assert!(!score_math(&AnswerKey::failed(""), "anything"));
    }

    #[test]
    fn passing_program_passes_every_test() {
        let program = "def add(a, b):\n    return a + b\n";
        let tests = asserts(&["assert add(1, 2) == 3", "assert add(-1, 1) == 0"]);
        let report = run_code_tests(program, &tests, &EvalLimits::default()).unwrap();
        assert!(report.all_passed);
        assert!(!report.timed_out);
        assert!(report.per_test.iter().all(|t| t.passed));
    }

    #[test]
    fn one_bad_test_does_not_disturb_the_others() {
        let program = "def f(x):\n    if x == 2:\n        raise ValueError('boom')\n    return x\n";
        let tests = asserts(&["assert f(1) == 1", "assert f(2) == 2", "assert f(3) == 3"]);
        let report = run_code_tests(program, &tests, &EvalLimits::default()).unwrap();
        let pattern: Vec<bool> = report.per_test.iter().map(|t| t.passed).collect();
        assert_eq!(pattern, vec![true, false, true]);
        assert!(!report.all_passed);
        assert!(report.per_test[1].stderr.contains("ValueError"));
    }

    #[test]
    fn setup_preambles_run_before_their_assertion() {
        let program = "def scale(x, k):\n    return x * k\n";
        let tests = vec![TestCase::with_setup("assert scale(base, 2) == 14", "base = 7")];
        let report = run_code_tests(program, &tests, &EvalLimits::default()).unwrap();
        assert!(report.all_passed);
    }

    #[test]
    fn infinite_loops_are_killed_and_flagged() {
        let program = "def spin():\n    while True:\n        pass\n";
        let tests = asserts(&["assert spin() is None"]);
        let report = run_code_tests(program, &tests, &limits_ms(600)).unwrap();
        assert!(report.timed_out);
        assert!(!report.all_passed);
        assert!(report.per_test[0].timed_out);
        assert!(!report.per_test[0].passed);
    }

    #[test]
    fn network_attempts_fail_inside_the_sandbox() {
        let program = "import socket\n\ndef probe():\n    socket.create_connection((\"127.0.0.1\", 9), timeout=1)\n    return True\n";
        let tests = asserts(&["assert probe()"]);
        let report = run_code_tests(program, &tests, &EvalLimits::default()).unwrap();
        assert!(!report.all_passed);
        assert!(report.per_test[0].stderr.contains("network access is disabled"));
    }

    #[test]
    fn writes_outside_scratch_fail_inside_the_sandbox() {
        let program = "def leak():\n    with open(\"/tmp/plancade-escape-attempt\", \"w\") as f:\n        f.write(\"x\")\n    return True\n";
        let tests = asserts(&["assert leak()"]);
        let report = run_code_tests(program, &tests, &EvalLimits::default()).unwrap();
        assert!(!report.all_passed);
        assert!(report.per_test[0].stderr.contains("outside the sandbox scratch directory"));
        assert!(!std::path::Path::new("/tmp/plancade-escape-attempt").exists());
    }

    #[test]
    fn writes_inside_scratch_are_allowed() {
        let program = "def save():\n    with open(\"local.txt\", \"w\") as f:\n        f.write(\"ok\")\n    return open(\"local.txt\").read()\n";
        let tests = asserts(&["assert save() == 'ok'"]);
        let report = run_code_tests(program, &tests, &EvalLimits::default()).unwrap();
        assert!(report.all_passed, "stderr: {}", report.per_test[0].stderr);
    }

    #[test]
    fn empty_program_fails_every_test() {
        let tests = asserts(&["assert missing() == 1", "assert also_missing() == 2"]);
        let report = run_code_tests("", &tests, &EvalLimits::default()).unwrap();
        assert!(!report.all_passed);
        assert!(report.per_test.iter().all(|t| !t.passed));
    }
}
