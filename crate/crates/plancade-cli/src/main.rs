//! Operator command line for the plancade cascade engine.

use std::collections::BTreeSet;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use plancade::backends::{
    CacheAppender, HttpBackend, RecordingBackend, ReplayBackend, TranscriptCache,
};
use plancade::config::PipelineConfig;
use plancade::dataset::{convert_math_jsonl, convert_mbpp_jsonl, load_tasks, write_tasks};
use plancade::engine::{report::write_outputs, run_dataset, BackendSet, EngineOptions, RunOptions};
use plancade::sweep::{replay_exhaustive, sweep, StageSubset, SweepGrid};
use plancade::{RunReport, Task};

/// Exit code for configuration and usage problems.
const EXIT_CONFIG: i32 = 2;
/// Exit code for internal failures (backends, I/O mid-run).
const EXIT_INTERNAL: i32 = 1;
/// Exit code for runs that finished with some failed tasks.
const EXIT_PARTIAL: i32 = 3;

#[derive(Parser)]
#[command(
    name = "plancade",
    version,
    about = "Run, tune, and compare planner/executor model cascades"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pipeline over a dataset and write report, ledger, and transcripts.
    Run(RunArgs),
    /// Re-decide thresholds, sample counts, and stage subsets offline from a
    /// recorded cache.
    Sweep(SweepArgs),
    /// Compare finished run directories.
    Report(ReportArgs),
    /// Convert public dataset exports into the native task format.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline TOML configuration.
    #[arg(long)]
    config: PathBuf,
    /// Task dataset, one JSON task per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for report.json, tasks.csv, ledger.csv, transcripts.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Where completions come from and go to.
    #[arg(long, value_enum, default_value_t = Mode::Live)]
    mode: Mode,
    /// Transcript cache file; required for record and replay modes.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Override the configured random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// How many tasks run concurrently.
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Run every stage for every task, even after an early acceptance.
    #[arg(long)]
    exhaustive: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Call the configured endpoints.
    Live,
    /// Call the endpoints and append every exchange to the cache.
    Record,
    /// Answer every request from the cache; no network.
    Replay,
}

#[derive(Args)]
struct SweepArgs {
    /// Pipeline TOML configuration the cache was recorded under.
    #[arg(long)]
    config: PathBuf,
    /// Task dataset, one JSON task per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Transcript cache holding an exhaustive recording.
    #[arg(long)]
    cache: PathBuf,
    /// First-stage thresholds to try.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.75])]
    tau1: Vec<f64>,
    /// Later-stage thresholds to try.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.75])]
    tau2: Vec<f64>,
    /// Sample-count prefixes to try; defaults to the recorded count.
    #[arg(long, value_delimiter = ',')]
    samples: Option<Vec<usize>>,
    /// Stage subsets to try.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SubsetArg::Full])]
    stages: Vec<SubsetArg>,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    /// Every configured stage.
    Full,
    /// Only the first two stages.
    FirstTwo,
    /// Only the last two stages.
    LastTwo,
}

impl From<SubsetArg> for StageSubset {
    fn from(value: SubsetArg) -> Self {
        match value {
            SubsetArg::Full => StageSubset::Full,
            SubsetArg::FirstTwo => StageSubset::FirstTwo,
            SubsetArg::LastTwo => StageSubset::LastTwo,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Finished run directories, each containing a report.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Source record layout.
    #[arg(long, value_enum)]
    format: Format,
    /// Source JSONL file.
    #[arg(long)]
    input: PathBuf,
    /// Destination task JSONL file.
    #[arg(long)]
    output: PathBuf,
    /// Prefix for generated task ids; defaults to the format name.
    #[arg(long)]
    id_prefix: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Competition-math records: problem, level, solution with a boxed answer.
    Math,
    /// Python programming records: task_id, text, test_list, challenge_test_list.
    Mbpp,
}

/// A command failure bound to the exit code it should produce.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_CONFIG, error: error.into() }
    }

    fn internal(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_INTERNAL, error: error.into() }
    }
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
        Command::Convert(args) => cmd_convert(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            std::process::exit(failure.code);
        }
    }
}

fn load_inputs(config: &Path, dataset: &Path) -> Result<(PipelineConfig, Vec<Task>), Failure> {
    let config = PipelineConfig::load(config)
        .with_context(|| format!("loading config {}", config.display()))
        .map_err(Failure::config)?;
    let tasks = load_tasks(dataset)
        .with_context(|| format!("loading dataset {}", dataset.display()))
        .map_err(Failure::config)?;
    Ok((config, tasks))
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::internal(anyhow!(e)))
}

fn cmd_run(args: RunArgs) -> Result<i32, Failure> {
    let (mut config, tasks) = load_inputs(&args.config, &args.dataset)?;
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }
    let backends = build_backends(&config, args.mode, args.cache.as_deref())?;
    let options = RunOptions {
        parallelism: args.parallelism,
        engine: EngineOptions { exhaustive: args.exhaustive, ..EngineOptions::default() },
    };
    let rt = runtime()?;
    let result = rt
        .block_on(run_dataset(&tasks, &config, &backends, &options))
        .context("running the pipeline")
        .map_err(Failure::internal)?;
    write_outputs(&args.out, &result)
        .with_context(|| format!("writing outputs to {}", args.out.display()))
        .map_err(Failure::internal)?;

    let report = &result.report;
    println!("tasks: {} ({} failed)", report.task_count, report.failure_count);
    match report.accuracy {
        Some(accuracy) => println!(
            "accuracy: {accuracy:.4} ({}/{} scored)",
            report.correct_count, report.scored_count
        ),
        None => println!("accuracy: n/a (no gold answers)"),
    }
    let resolved: Vec<String> = report
        .resolved_by_stage
        .iter()
        .map(|(stage, count)| format!("s{stage} {count}"))
        .collect();
    println!("resolved: {}", resolved.join(", "));
    let per_million = report
        .cost_per_million_tasks
        .as_deref()
        .map_or(String::from("n/a"), |p| format!("${p}"));
    println!("cost: ${} total, {per_million} per million tasks", report.total_cost);
    if report.any_usage_estimated {
        println!("note: some token counts were estimated, costs are a lower-confidence bound");
    }
    println!("outputs: {}", args.out.display());

    if result.failures.is_empty() {
        Ok(0)
    } else {
        for failure in &result.failures {
            eprintln!("task {} failed: {}", failure.task_id, failure.error);
        }
        Ok(EXIT_PARTIAL)
    }
}

fn build_backends(
    config: &PipelineConfig,
    mode: Mode,
    cache: Option<&Path>,
) -> Result<BackendSet, Failure> {
    let mut backends = BackendSet::new();
    match mode {
        Mode::Live => {
            for (role, spec) in &config.models {
                let backend =
                    HttpBackend::new(spec.clone()).map_err(|e| Failure::config(anyhow!(e)))?;
                backends.insert(*role, Arc::new(backend));
            }
        }
        Mode::Record => {
            let path = cache.ok_or_else(|| {
                Failure::config(anyhow!("--mode record requires --cache <path>"))
            })?;
            let appender = Arc::new(
                CacheAppender::open(path)
                    .with_context(|| format!("opening cache {}", path.display()))
                    .map_err(Failure::config)?,
            );
            for (role, spec) in &config.models {
                let live = HttpBackend::new(spec.clone())
                    .map_err(|e| Failure::config(anyhow!(e)))?;
                backends.insert(
                    *role,
                    Arc::new(RecordingBackend::new(Arc::new(live), appender.clone())),
                );
            }
        }
        Mode::Replay => {
            let path = cache.ok_or_else(|| {
                Failure::config(anyhow!("--mode replay requires --cache <path>"))
            })?;
            let cache = Arc::new(load_cache(path)?);
            for (role, spec) in &config.models {
                backends.insert(*role, Arc::new(ReplayBackend::new(spec.clone(), cache.clone())));
            }
        }
    }
    Ok(backends)
}

fn load_cache(path: &Path) -> Result<TranscriptCache, Failure> {
    let (cache, issues) = TranscriptCache::load(path)
        .with_context(|| format!("loading cache {}", path.display()))
        .map_err(Failure::config)?;
    for issue in &issues {
        tracing::warn!("cache line {}: {}", issue.line, issue.reason);
    }
    Ok(cache)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, Failure> {
    let (config, tasks) = load_inputs(&args.config, &args.dataset)?;
    let cache = Arc::new(load_cache(&args.cache)?);
    let rt = runtime()?;
    let result = rt
        .block_on(replay_exhaustive(&tasks, &config, cache))
        .context("replaying the cache exhaustively")
        .map_err(Failure::internal)?;
    if !result.failures.is_empty() {
        let mut error = anyhow!(
            "{} task(s) could not be replayed; the cache does not cover this dataset and config",
            result.failures.len()
        );
        if let Some(first) = result.failures.first() {
            error = error.context(format!("first failure: {}: {}", first.task_id, first.error));
        }
        return Err(Failure::config(error));
    }
    let grid = SweepGrid {
        tau1: args.tau1,
        tau2: args.tau2,
        sample_counts: args.samples,
        stage_subsets: args.stages.into_iter().map(StageSubset::from).collect(),
    };
    let table =
        sweep(&config, &result.traces, &grid).map_err(|e| Failure::config(anyhow!(e)))?;
    print!("{table}");
    if let Some(path) = &args.csv {
        std::fs::write(path, table.to_csv())
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::internal)?;
    }
    Ok(0)
}

fn cmd_report(args: ReportArgs) -> Result<i32, Failure> {
    let mut reports: Vec<(String, RunReport)> = Vec::new();
    for dir in &args.runs {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::config)?;
        let report: RunReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(Failure::config)?;
        reports.push((dir.display().to_string(), report));
    }

    // Comparisons only mean something over the same tasks.
    let ids: Vec<BTreeSet<&str>> = reports
        .iter()
        .map(|(_, r)| r.tasks.iter().map(|t| t.task_id.as_str()).collect())
        .collect();
    if let Some(pos) = ids.iter().position(|set| *set != ids[0]) {
        return Err(Failure::config(anyhow!(
            "incompatible reports: {} and {} cover different task ids",
            reports[0].0,
            reports[pos].0
        )));
    }

    let name_width =
        reports.iter().map(|(name, _)| name.len()).max().unwrap_or(3).max("run".len());
    let stage_numbers: BTreeSet<usize> = reports
        .iter()
        .flat_map(|(_, r)| r.resolved_by_stage.keys().copied())
        .collect();
    print!("{:<name_width$} {:>6} {:>9}", "run", "tasks", "accuracy");
    for stage in &stage_numbers {
        print!(" {:>6}", format!("@s{stage}"));
    }
    println!(" {:>14} {:>16}", "cost_usd", "per_million_usd");
    for (name, report) in &reports {
        print!("{name:<name_width$} {:>6}", report.task_count);
        match report.accuracy {
            Some(accuracy) => print!(" {accuracy:>9.4}"),
            None => print!(" {:>9}", "-"),
        }
        for stage in &stage_numbers {
            print!(" {:>6}", report.resolved_by_stage.get(stage).copied().unwrap_or(0));
        }
        println!(
            " {:>14} {:>16}",
            report.total_cost.to_string(),
            report.cost_per_million_tasks.as_deref().unwrap_or("-")
        );
    }

    let tags: BTreeSet<&str> = reports
        .iter()
        .flat_map(|(_, r)| r.tasks.iter().filter_map(|t| t.difficulty_tag.as_deref()))
        .collect();
    if !tags.is_empty() {
        let tag_width = tags.iter().map(|t| t.len()).max().unwrap_or(0).max(5);
        let name_width = name_width.max("by difficulty".len());
        println!();
        print!("{:<name_width$}", "by difficulty");
        for tag in &tags {
            print!(" {tag:>tag_width$}");
        }
        println!();
        for (name, report) in &reports {
            print!("{name:<name_width$}");
            for tag in &tags {
                let scored: Vec<bool> = report
                    .tasks
                    .iter()
                    .filter(|t| t.difficulty_tag.as_deref() == Some(*tag))
                    .filter_map(|t| t.correct)
                    .collect();
                if scored.is_empty() {
                    print!(" {:>tag_width$}", "-");
                } else {
                    let correct = scored.iter().filter(|c| **c).count();
                    print!(" {:>tag_width$}", format!("{correct}/{}", scored.len()));
                }
            }
            println!();
        }
    }
    Ok(0)
}

fn cmd_convert(args: ConvertArgs) -> Result<i32, Failure> {
    let file = std::fs::File::open(&args.input)
        .with_context(|| format!("opening {}", args.input.display()))
        .map_err(Failure::config)?;
    let reader = BufReader::new(file);
    let prefix = args.id_prefix.unwrap_or_else(|| {
        match args.format {
            Format::Math => "math-",
            Format::Mbpp => "mbpp-",
        }
        .to_string()
    });
    let outcome = match args.format {
        Format::Math => convert_math_jsonl(reader, &prefix),
        Format::Mbpp => convert_mbpp_jsonl(reader, &prefix),
    }
    .with_context(|| format!("converting {}", args.input.display()))
    .map_err(Failure::config)?;
    let out = std::fs::File::create(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))
        .map_err(Failure::internal)?;
    write_tasks(&outcome.tasks, std::io::BufWriter::new(out))
        .with_context(|| format!("writing {}", args.output.display()))
        .map_err(Failure::internal)?;
    eprintln!(
        "converted {} task(s), skipped {} record(s)",
        outcome.tasks.len(),
        outcome.skipped.len()
    );
    for skip in &outcome.skipped {
        eprintln!("  line {}: {}", skip.line, skip.reason);
    }
    Ok(0)
}
