use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gistify_core::diagnostics::{select_hard_subset, HardCandidate};
use gistify_core::evaluate::{
    evaluate_batch, load_tasks, read_results, EvalOptions, Evaluator, TaskStatus, TraceSource, RECORDED_ROOT,
};
use gistify_core::metrics::StderrMode;
use gistify_core::report::{aggregate, render, Format, GroupBy};
use gistify_core::sandbox::{run_command, run_with_trace, Runner, RunnerConfig, DEFAULT_TIMEOUT};
use gistify_core::source::ParsedSource;
use gistify_core::task::{build_tasks, RepositoryRef, TaskDescriptor, Template, DEFAULT_WORKING_DIR};
use gistify_core::trace::write_trace;

/// Evaluate single-file distillations of a repository's test runs.
#[derive(Parser, Debug)]
#[command(name = "gistify", version)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect, group and filter a repository's tests into task files.
    BuildTasks(BuildTasks),
    /// Score a directory of gists against their tasks.
    Evaluate(Evaluate),
    /// Summarize a results file.
    Report(Report),
    /// Pick the hardest tasks by trace length and breadth.
    SelectHard(SelectHard),
    /// Trace a task's original test run.
    Trace(TraceCmd),
    /// Run a task's entrypoint in a sandbox and print the outcome.
    Run(RunCmd),
    /// Print the block tree and line tags of a source file.
    InspectBlocks { file: PathBuf },
}

#[derive(Args, Debug)]
struct SandboxFlags {
    /// Per-run wall-clock limit in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    /// Directory holding the tracer's interpreter startup hook.
    #[arg(long)]
    shim: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildTasks {
    #[arg(long)]
    repo: PathBuf,
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Working directory named in the prompt.
    #[arg(long)]
    workdir: Option<String>,
    #[command(flatten)]
    sandbox: SandboxFlags,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long)]
    tasks: PathBuf,
    /// Directory of `<task_id>.py` gists.
    #[arg(long)]
    gists: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    fidelity_stderr: Option<String>,
    /// Write per-line annotations next to the results file.
    #[arg(long)]
    emit_line_detail: bool,
    /// Replay recorded traces from this directory instead of tracing live.
    #[arg(long, conflicts_with = "record_traces")]
    traces: Option<PathBuf>,
    /// Save live traces into this directory for later replay.
    #[arg(long)]
    record_traces: Option<PathBuf>,
    #[command(flatten)]
    sandbox: SandboxFlags,
}

#[derive(Args, Debug)]
struct Report {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct SelectHard {
    #[arg(long)]
    k: usize,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TraceCmd {
    #[arg(long)]
    task: PathBuf,
    /// Write the trace here, rebased onto a neutral root.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sandbox: SandboxFlags,
}

#[derive(Args, Debug)]
struct RunCmd {
    #[arg(long)]
    task: PathBuf,
    /// Attach the tracer and report trace statistics.
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    sandbox: SandboxFlags,
}

/// Defaults read from `--config`; command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    timeout: Option<u64>,
    shim: Option<PathBuf>,
    image: Option<String>,
    template: Option<String>,
    workdir: Option<String>,
    jobs: Option<usize>,
    fidelity_stderr: Option<String>,
    emit_line_detail: Option<bool>,
    traces: Option<PathBuf>,
    record_traces: Option<PathBuf>,
    group_by: Option<String>,
    format: Option<String>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn runner(flags: &SandboxFlags, config: &Config, image: Option<String>) -> Runner {
    Runner::new(RunnerConfig {
        timeout: flags
            .timeout
            .or(config.timeout)
            .map(Duration::from_secs)
            .unwrap_or(DEFAULT_TIMEOUT),
        image_ref: image,
        shim_dir: flags.shim.clone().or_else(|| config.shim.clone()),
        ..RunnerConfig::default()
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::BuildTasks(a) => build(a, &config),
        Command::Evaluate(a) => evaluate(a, &config),
        Command::Report(a) => report(a, &config),
        Command::SelectHard(a) => select_hard(a),
        Command::Trace(a) => trace(a, &config),
        Command::Run(a) => run(a, &config),
        Command::InspectBlocks { file } => inspect(&file),
    }
}

fn build(a: BuildTasks, config: &Config) -> Result<ExitCode> {
    let template: Template = a
        .template
        .or_else(|| config.template.clone())
        .unwrap_or_else(|| "base".into())
        .parse()?;
    let image = a.image.or_else(|| config.image.clone());
    let workdir = a
        .workdir
        .or_else(|| config.workdir.clone())
        .unwrap_or_else(|| DEFAULT_WORKING_DIR.into());
    let repo = RepositoryRef::scan(&a.repo, image.clone())?;
    let runner = runner(&a.sandbox, config, image);
    let (specs, excluded) = build_tasks(&repo, &runner, template, &workdir, &a.out)?;
    let mut log = String::new();
    for e in &excluded {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    fs::write(a.out.join("excluded.jsonl"), log)?;
    println!("{} tasks written to {}, {} excluded", specs.len(), a.out.display(), excluded.len());
    for e in &excluded {
        println!("  excluded {} ({:?})", e.base_node_id, e.reason);
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: Evaluate, config: &Config) -> Result<ExitCode> {
    let fidelity_mode: StderrMode = a
        .fidelity_stderr
        .or_else(|| config.fidelity_stderr.clone())
        .map(|s| s.parse())
        .transpose()
        .map_err(anyhow::Error::msg)?
        .unwrap_or_default();
    let record = a.record_traces.or_else(|| config.record_traces.clone());
    let replay = a.traces.or_else(|| config.traces.clone());
    let shim = a.sandbox.shim.clone().or_else(|| config.shim.clone());
    let traces = match (replay, record, &shim) {
        (Some(_), Some(_), _) => bail!("--traces and --record-traces are mutually exclusive"),
        (Some(dir), None, _) => TraceSource::Recorded(dir),
        (None, record, Some(_)) => TraceSource::Live { record },
        (None, Some(_), None) => bail!("--record-traces needs --shim"),
        (None, None, None) => TraceSource::Disabled,
    };
    let line_detail_dir = (a.emit_line_detail || config.emit_line_detail.unwrap_or(false)).then(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".detail");
        a.out.with_file_name(name)
    });
    let tasks = load_tasks(&a.tasks)?;
    if tasks.is_empty() {
        bail!("no task descriptors in {}", a.tasks.display());
    }
    let image = tasks[0].image_ref.clone();
    let runner = runner(&a.sandbox, config, image);
    let options = EvalOptions {
        fidelity_mode,
        traces,
        line_detail_dir,
        jobs: a
            .jobs
            .or(config.jobs)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    };
    let evaluator = Evaluator::new(&runner, options);
    let (summary, reports) = evaluate_batch(&evaluator, &tasks, &a.gists, &a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    for r in reports.iter().filter(|r| r.status == TaskStatus::HarnessError) {
        eprintln!("harness error in {}: {}", r.task_id, r.error.as_deref().unwrap_or("unknown"));
    }
    Ok(if summary.harness_errors > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn report(a: Report, config: &Config) -> Result<ExitCode> {
    let group_by: GroupBy = a
        .group_by
        .or_else(|| config.group_by.clone())
        .unwrap_or_else(|| "repo".into())
        .parse()
        .map_err(anyhow::Error::msg)?;
    let format: Format = a
        .format
        .or_else(|| config.format.clone())
        .unwrap_or_else(|| "md".into())
        .parse()
        .map_err(anyhow::Error::msg)?;
    let records = read_results(&a.input)?;
    let summary = aggregate(&records, group_by)?;
    print!("{}", render(&summary, format));
    Ok(ExitCode::SUCCESS)
}

fn select_hard(a: SelectHard) -> Result<ExitCode> {
    let records = read_results(&a.input)?;
    let mut candidates: Vec<HardCandidate> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in records {
        let Some(stats) = r.difficulty else { continue };
        if seen.insert(r.task_id.clone()) {
            candidates.push(HardCandidate {
                task_id: r.task_id,
                node_id: r.base_node_id,
                stats,
            });
        }
    }
    if candidates.is_empty() {
        bail!("no records with difficulty statistics in {}", a.input.display());
    }
    let subset = select_hard_subset(&candidates, a.k);
    let mut text = subset.iter().map(|c| c.task_id.as_str()).collect::<Vec<_>>().join("\n");
    text.push('\n');
    fs::write(&a.out, text)?;
    println!("{} of {} tasks selected", subset.len(), candidates.len());
    Ok(ExitCode::SUCCESS)
}

fn trace(a: TraceCmd, config: &Config) -> Result<ExitCode> {
    let task = TaskDescriptor::load(&a.task)?;
    let runner = runner(&a.sandbox, config, task.image_ref.clone());
    if runner.config().shim_dir.is_none() {
        bail!("tracing needs --shim");
    }
    let sandbox = runner.from_repo(&task.repo_root)?;
    let (outcome, trace) = run_with_trace(&sandbox, &task.entrypoint, sandbox.workdir())?;
    let trace = trace.with_context(|| format!("exit status {}", outcome.exit_status))?;
    if let Some(out) = &a.out {
        let rebased = trace.rebase(sandbox.workdir(), Path::new(RECORDED_ROOT));
        write_trace(&rebased.events, out)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "task_id": task.task_id(),
            "exit_status": outcome.exit_status,
            "call_count": trace.call_count,
            "unique_files": trace.unique_files,
            "events": trace.events.len(),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn run(a: RunCmd, config: &Config) -> Result<ExitCode> {
    let task = TaskDescriptor::load(&a.task)?;
    let runner = runner(&a.sandbox, config, task.image_ref.clone());
    let sandbox = runner.from_repo(&task.repo_root)?;
    let mut value = if a.trace {
        let (outcome, trace) = run_with_trace(&sandbox, &task.entrypoint, sandbox.workdir())?;
        let mut v = serde_json::to_value(&outcome)?;
        v["trace"] = match trace {
            Ok(t) => serde_json::json!({"call_count": t.call_count, "unique_files": t.unique_files}),
            Err(e) => serde_json::json!({"error": e.to_string()}),
        };
        v
    } else {
        serde_json::to_value(run_command(&sandbox, &task.entrypoint)?)?
    };
    value["command"] = task.entrypoint.clone().into();
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(ExitCode::SUCCESS)
}

fn inspect(file: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let parsed = ParsedSource::parse(&text, file)?;
    let value = serde_json::json!({
        "tree": parsed.tree,
        "classification": parsed.classification,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(ExitCode::SUCCESS)
}
