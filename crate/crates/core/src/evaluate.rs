//! Per-task evaluation and batch orchestration.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{categorize_failure, trace_difficulty, DifficultyStats, ErrorCategory};
use crate::integrate::{integrate_original_test, locate_test_function, test_f1, GistCandidate, Integration};
use crate::metrics::{
    execution_detail, execution_fidelity, line_execution_rate, line_existence_rate, BlockMatch, CodebaseIndex,
    OutputContext, StderrMode,
};
use crate::par;
use crate::sandbox::{run_command, run_with_trace, RunOutcome, Runner, SandboxError, SandboxHandle, SandboxMode};
use crate::source::LineTag;
use crate::task::{RepositoryRef, TaskDescriptor};
use crate::trace::{load_trace, write_trace, ExecutionTrace, TraceError};

pub const SCHEMA_VERSION: u32 = 1;
/// Root that recorded traces are rebased onto.
pub const RECORDED_ROOT: &str = "/sandbox";

/// Where execution traces come from.
#[derive(Clone, Debug, Default)]
pub enum TraceSource {
    /// No tracing: execution rate and difficulty stay null.
    #[default]
    Disabled,
    /// Trace every run with the runner's tracer hook, optionally saving the
    /// traces for later replay.
    Live { record: Option<PathBuf> },
    /// Replay `<dir>/<task_id>.baseline.jsonl` and `<dir>/<task_id>.gist.jsonl`.
    Recorded(PathBuf),
}

impl TraceSource {
    fn label(&self) -> &'static str {
        match self {
            TraceSource::Disabled => "disabled",
            TraceSource::Live { .. } => "live",
            TraceSource::Recorded(_) => "recorded",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub fidelity_mode: StderrMode,
    pub traces: TraceSource,
    /// Directory for per-task line annotations.
    pub line_detail_dir: Option<PathBuf>,
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Evaluated,
    BaselineFailed,
    HarnessError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub sandbox_mode: SandboxMode,
    pub trace_source: String,
    pub fidelity_mode: StderrMode,
    pub baseline_secs: Option<f64>,
    pub gist_secs: Option<f64>,
    /// The integrated test's lines count toward the execution denominator.
    pub test_lines_in_execution: bool,
    pub notes: Vec<String>,
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: u32,
    pub task_id: String,
    pub repo: String,
    pub gist_set: String,
    pub base_node_id: String,
    pub status: TaskStatus,
    pub fidelity: Option<u8>,
    pub existence_rate: Option<f64>,
    pub execution_rate: Option<f64>,
    pub test_f1: Option<f64>,
    pub error_category: Option<ErrorCategory>,
    pub difficulty: Option<DifficultyStats>,
    pub pytest_pass_rate: Option<f64>,
    pub variants: usize,
    pub gist_passed: Option<u32>,
    pub integration: Option<Integration>,
    pub repo_imports: Vec<String>,
    pub name_collisions: Vec<String>,
    pub first_output_difference: Option<(String, String)>,
    pub run_metadata: RunMetadata,
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Task(#[from] crate::task::TaskError),
    #[error(transparent)]
    Integration(#[from] crate::integrate::IntegrationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("results file {path} line {line}: {message}")]
    BadResults { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

type RepoEntry = Arc<OnceLock<Result<Arc<(RepositoryRef, CodebaseIndex)>, String>>>;

/// Scans and indexes each repository once, however many tasks use it.
#[derive(Default)]
pub struct RepoCache {
    entries: Mutex<HashMap<PathBuf, RepoEntry>>,
}

impl RepoCache {
    pub fn get(&self, root: &Path, image_ref: Option<String>) -> Result<Arc<(RepositoryRef, CodebaseIndex)>, String> {
        let entry = self
            .entries
            .lock()
            .expect("repo cache poisoned")
            .entry(root.to_path_buf())
            .or_default()
            .clone();
        entry
            .get_or_init(|| {
                let repo = RepositoryRef::scan(root, image_ref).map_err(|e| e.to_string())?;
                let index = CodebaseIndex::build(&repo.root_path).map_err(|e| e.to_string())?;
                Ok(Arc::new((repo, index)))
            })
            .clone()
    }
}

/// Everything shared across the tasks of one batch.
pub struct Evaluator<'a> {
    pub runner: &'a Runner,
    pub options: EvalOptions,
    pub repos: RepoCache,
}

struct TracedRun {
    outcome: RunOutcome,
    trace: Option<ExecutionTrace>,
    note: Option<String>,
}

impl<'a> Evaluator<'a> {
    pub fn new(runner: &'a Runner, options: EvalOptions) -> Self {
        Evaluator {
            runner,
            options,
            repos: RepoCache::default(),
        }
    }

    fn run(&self, sandbox: &SandboxHandle, command: &str, task_id: &str, role: &str) -> Result<TracedRun, SandboxError> {
        let from_trace = |t: Result<ExecutionTrace, TraceError>| match t {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(format!("{role} trace: {e}"))),
        };
        match &self.options.traces {
            TraceSource::Disabled => Ok(TracedRun {
                outcome: run_command(sandbox, command)?,
                trace: None,
                note: None,
            }),
            TraceSource::Recorded(dir) => {
                let outcome = run_command(sandbox, command)?;
                let path = dir.join(format!("{task_id}.{role}.jsonl"));
                let (trace, note) = from_trace(load_trace(&path, Some(Path::new(RECORDED_ROOT))));
                Ok(TracedRun { outcome, trace, note })
            }
            TraceSource::Live { record } => {
                let (outcome, trace) = run_with_trace(sandbox, command, sandbox.workdir())?;
                let (trace, mut note) = from_trace(trace);
                if let (Some(dir), Some(t)) = (record, &trace) {
                    let rebased = t.rebase(sandbox.workdir(), Path::new(RECORDED_ROOT));
                    let path = dir.join(format!("{task_id}.{role}.jsonl"));
                    if let Err(e) = fs::create_dir_all(dir).and_then(|_| write_trace(&rebased.events, &path)) {
                        note = Some(format!("could not record {}: {e}", path.display()));
                    }
                }
                Ok(TracedRun { outcome, trace, note })
            }
        }
    }

    /// Evaluates one gist against its task. `gist_path` need not exist.
    pub fn evaluate_task(&self, task: &TaskDescriptor, gist_path: &Path, gist_set: &str) -> EvaluationReport {
        let task_id = task.task_id();
        let mut report = EvaluationReport {
            schema: SCHEMA_VERSION,
            task_id: task_id.clone(),
            repo: task.repo_name(),
            gist_set: gist_set.to_string(),
            base_node_id: task.base_node_id.clone(),
            status: TaskStatus::Evaluated,
            fidelity: None,
            existence_rate: None,
            execution_rate: None,
            test_f1: None,
            error_category: None,
            difficulty: None,
            pytest_pass_rate: None,
            variants: task.variant_node_ids.len(),
            gist_passed: None,
            integration: None,
            repo_imports: Vec::new(),
            name_collisions: Vec::new(),
            first_output_difference: None,
            run_metadata: RunMetadata {
                sandbox_mode: self.runner.mode(),
                trace_source: self.options.traces.label().to_string(),
                fidelity_mode: self.options.fidelity_mode,
                baseline_secs: None,
                gist_secs: None,
                test_lines_in_execution: true,
                notes: Vec::new(),
            },
            error: None,
        };
        if let Err(e) = self.evaluate_into(task, gist_path, &mut report) {
            report.status = TaskStatus::HarnessError;
            report.error = Some(e.to_string());
        }
        report
    }

    fn evaluate_into(&self, task: &TaskDescriptor, gist_path: &Path, report: &mut EvaluationReport) -> Result<(), EvalError> {
        let repo_entry = self
            .repos
            .get(&task.repo_root, task.image_ref.clone())
            .map_err(|e| EvalError::Io {
                path: task.repo_root.clone(),
                source: std::io::Error::other(e),
            })?;
        let (repo, index) = (&repo_entry.0, &repo_entry.1);
        let base_test = task.base_test();

        let baseline_box = self.runner.from_repo(&repo.root_path)?;
        let baseline = self.run(&baseline_box, &task.entrypoint, &report.task_id, "baseline")?;
        report.run_metadata.baseline_secs = Some(baseline.outcome.duration_secs);
        report.run_metadata.notes.extend(baseline.note);
        if !baseline.outcome.succeeded() || !baseline.outcome.ran() {
            report.status = TaskStatus::BaselineFailed;
            report.error = Some(format!("baseline exited with status {}", baseline.outcome.exit_status));
            return Ok(());
        }
        report.difficulty = baseline.trace.as_ref().and_then(|t| trace_difficulty(t).ok());

        let test = locate_test_function(&repo.root_path, &base_test)?;

        let gist = match fs::read_to_string(gist_path) {
            Ok(text) => GistCandidate::new(gist_path, text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                report.fidelity = Some(0);
                report.error_category = Some(ErrorCategory::FileCreationFailure);
                return Ok(());
            }
            Err(e) => return Err(io_err(gist_path)(e)),
        };

        let existence = gist.parsed.as_ref().map(|p| line_existence_rate(&p.tree, index));
        report.existence_rate = existence.as_ref().and_then(|e| e.rate);
        if let Some(err) = gist.parse_error() {
            report.run_metadata.notes.push(format!("gist does not parse: {err}"));
        }
        report.test_f1 = Some(test_f1(&test, &gist).f1);

        let integrated = integrate_original_test(&gist, &test);
        report.integration = Some(integrated.how);
        let gist_box = self.runner.gist_only(&task.gist_filename, &integrated.gist.content)?;
        gist_box.write_file(&format!("{}.integrated", task.gist_filename), &integrated.gist.content)?;
        gist_box.write_file(&format!("{}.orig", task.gist_filename), &gist.content)?;
        let gist_run = self.run(&gist_box, &task.gist_entrypoint(), &report.task_id, "gist")?;
        report.run_metadata.gist_secs = Some(gist_run.outcome.duration_secs);

        let check = execution_fidelity(
            &baseline.outcome,
            &OutputContext {
                sandbox_root: baseline_box.visible_root(),
                test_file: base_test.file.clone(),
            },
            &gist_run.outcome,
            &OutputContext {
                sandbox_root: gist_box.visible_root(),
                test_file: task.gist_filename.clone(),
            },
            self.options.fidelity_mode,
        );
        report.fidelity = Some(check.fidelity);
        report.first_output_difference = check.first_difference.clone();

        let passed = gist_run.outcome.counts.map(|c| c.passed).unwrap_or(0);
        report.gist_passed = Some(passed);
        report.pytest_pass_rate = Some(passed as f64 / report.variants.max(1) as f64);

        let mut detail_lines = None;
        if gist_run.outcome.ran() {
            report.run_metadata.notes.extend(gist_run.note);
            match (&integrated.gist.parsed, &gist_run.trace) {
                (Some(parsed), Some(trace)) => {
                    let traced: HashSet<u32> = trace.lines_for(&task.gist_filename);
                    let rate = line_execution_rate(&parsed.classification, &traced);
                    if rate.rate.is_none() {
                        report.run_metadata.notes.push("gist has no executable lines".into());
                    }
                    report.execution_rate = rate.rate;
                    detail_lines = Some(execution_detail(&parsed.classification, &traced));
                }
                (None, _) => report.run_metadata.notes.push("integrated gist does not parse".into()),
                (_, None) => {}
            }
        }

        let output = format!("{}\n{}", gist_run.outcome.stdout, gist_run.outcome.stderr);
        let cat = categorize_failure(Some(&gist), &repo.package_names, &test, check.fidelity, Some(&output));
        report.error_category = Some(cat.category);
        report.repo_imports = cat.repo_imports;
        report.name_collisions = cat.name_collisions;

        if let Some(dir) = &self.options.line_detail_dir {
            write_detail(dir, report, existence.map(|e| e.blocks), detail_lines)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct LineDetail<'a> {
    task_id: &'a str,
    gist_set: &'a str,
    existence: Option<Vec<BlockMatch>>,
    execution: Option<Vec<ExecutedLine>>,
}

#[derive(Serialize)]
struct ExecutedLine {
    line: u32,
    tag: LineTag,
    executed: bool,
}

fn write_detail(
    dir: &Path,
    report: &EvaluationReport,
    existence: Option<Vec<BlockMatch>>,
    execution: Option<Vec<(u32, LineTag, bool)>>,
) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let detail = LineDetail {
        task_id: &report.task_id,
        gist_set: &report.gist_set,
        existence,
        execution: execution.map(|v| {
            v.into_iter()
                .map(|(line, tag, executed)| ExecutedLine { line, tag, executed })
                .collect()
        }),
    };
    let path = dir.join(format!("{}.{}.json", report.task_id, report.gist_set));
    let text = serde_json::to_string_pretty(&detail).expect("detail serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Reads every record of a results file.
pub fn read_results(path: &Path) -> Result<Vec<EvaluationReport>, EvalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvaluationReport = serde_json::from_str(&line).map_err(|e| EvalError::BadResults {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.schema != SCHEMA_VERSION {
            return Err(EvalError::BadResults {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("unsupported schema {}", record.schema),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Appends records to a results file from any number of threads.
pub struct ResultsWriter {
    path: PathBuf,
    file: Mutex<fs::File>,
}

impl ResultsWriter {
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(ResultsWriter {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, report: &EvaluationReport) -> Result<(), EvalError> {
        let mut line = serde_json::to_string(report).expect("report serializes");
        line.push('\n');
        let mut file = self.file.lock().expect("results writer poisoned");
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(io_err(&self.path))
    }
}

/// Loads every `*.json` task descriptor in a directory, sorted by name.
pub fn load_tasks(dir: &Path) -> Result<Vec<TaskDescriptor>, EvalError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| TaskDescriptor::load(p).map_err(EvalError::from))
        .collect()
}

/// Location of a task's gist inside a gist set directory.
pub fn gist_path(gists: &Path, task_id: &str) -> PathBuf {
    gists.join(format!("{task_id}.py"))
}

pub fn gist_set_name(gists: &Path) -> String {
    gists
        .canonicalize()
        .unwrap_or_else(|_| gists.to_path_buf())
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "gists".into())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BatchSummary {
    pub evaluated: usize,
    pub baseline_failed: usize,
    pub harness_errors: usize,
    /// Tasks already present in the results file.
    pub skipped: usize,
}

/// Evaluates every task whose id is not yet in `out`, appending one record
/// per task. Records are returned in task order.
pub fn evaluate_batch(
    evaluator: &Evaluator<'_>,
    tasks: &[TaskDescriptor],
    gists: &Path,
    out: &Path,
) -> Result<(BatchSummary, Vec<EvaluationReport>), EvalError> {
    let gist_set = gist_set_name(gists);
    let done: HashSet<(String, String)> = if out.exists() {
        read_results(out)?
            .into_iter()
            .map(|r| (r.task_id, r.gist_set))
            .collect()
    } else {
        HashSet::new()
    };
    let pending: Vec<&TaskDescriptor> = tasks
        .iter()
        .filter(|t| !done.contains(&(t.task_id(), gist_set.clone())))
        .collect();
    let writer = ResultsWriter::open(out)?;
    let started = Instant::now();
    let reports = Mutex::new(Vec::with_capacity(pending.len()));
    let write_error = Mutex::new(None);
    par::for_each_bounded(evaluator.options.jobs.max(1), &pending, |task| {
        let report = evaluator.evaluate_task(task, &gist_path(gists, &task.task_id()), &gist_set);
        log::info!("{} {:?} fidelity={:?}", report.task_id, report.status, report.fidelity);
        if let Err(e) = writer.append(&report) {
            write_error.lock().expect("poisoned").get_or_insert(e);
        }
        reports.lock().expect("poisoned").push(report);
    });
    if let Some(e) = write_error.into_inner().expect("poisoned") {
        return Err(e);
    }
    let mut reports = reports.into_inner().expect("poisoned");
    reports.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let mut summary = BatchSummary {
        skipped: tasks.len() - pending.len(),
        ..BatchSummary::default()
    };
    for r in &reports {
        match r.status {
            TaskStatus::Evaluated => summary.evaluated += 1,
            TaskStatus::BaselineFailed => summary.baseline_failed += 1,
            TaskStatus::HarnessError => summary.harness_errors += 1,
        }
    }
    log::info!("evaluated {} tasks in {:.1}s", reports.len(), started.elapsed().as_secs_f64());
    Ok((summary, reports))
}
