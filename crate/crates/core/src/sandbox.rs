//! Isolated command execution.
//!
//! Every run happens in a scratch directory: either a copy of a repository
//! checkout or a directory holding only a gist file. When a container image is
//! configured the scratch directory is mounted into the container instead of
//! being used directly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, LazyLock, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use walkdir::WalkDir;

use crate::trace::{load_trace, ExecutionTrace, TraceError, TRACE_OUT_ENV, TRACE_SCOPE_ENV};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
/// Exit status reported for a run killed at its deadline.
pub const TIMEOUT_EXIT: i32 = 124;

const CONTAINER_WORKDIR: &str = "/app";
const CONTAINER_TRACE_DIR: &str = "/gistify/trace";
const CONTAINER_SHIM_DIR: &str = "/gistify/shim";

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("sandbox setup failed: {0}")]
    SetupFailed(String),
    #[error("empty command")]
    EmptyCommand,
}

impl SandboxError {
    fn io(what: impl std::fmt::Display, e: std::io::Error) -> Self {
        SandboxError::SetupFailed(format!("{what}: {e}"))
    }
}

/// Settings shared by every sandbox a runner creates.
#[derive(Clone, Debug)]
pub struct RunnerConfig {
    pub timeout: Duration,
    pub image_ref: Option<String>,
    /// Directory holding the tracer's interpreter startup hook.
    pub shim_dir: Option<PathBuf>,
    pub env: BTreeMap<String, String>,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            timeout: DEFAULT_TIMEOUT,
            image_ref: None,
            shim_dir: None,
            env: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SandboxMode {
    ScratchCopy,
    Container,
}

/// Creates sandboxes and serializes access to each repository checkout.
#[derive(Debug)]
pub struct Runner {
    config: RunnerConfig,
    checkouts: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
    tools: Option<TempDir>,
}

impl Runner {
    pub fn new(mut config: RunnerConfig) -> Self {
        // Commands run from the sandbox, so a relative shim path would dangle.
        if let Some(shim) = &config.shim_dir {
            if let Ok(abs) = std::path::absolute(shim) {
                config.shim_dir = Some(abs);
            }
        }
        Runner {
            tools: python_alias_dir(),
            config,
            checkouts: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &RunnerConfig {
        &self.config
    }

    pub fn mode(&self) -> SandboxMode {
        if self.config.image_ref.is_some() {
            SandboxMode::Container
        } else {
            SandboxMode::ScratchCopy
        }
    }

    fn checkout_lock(&self, root: &Path) -> Arc<Mutex<()>> {
        let mut map = self.checkouts.lock().expect("checkout registry poisoned");
        map.entry(root.to_path_buf()).or_default().clone()
    }

    /// Copies a repository checkout into a fresh sandbox.
    pub fn from_repo(&self, repo_root: &Path) -> Result<SandboxHandle, SandboxError> {
        let root = repo_root
            .canonicalize()
            .map_err(|e| SandboxError::io(repo_root.display(), e))?;
        let lock = self.checkout_lock(&root);
        let _guard = lock.lock().expect("checkout lock poisoned");
        let sandbox = self.empty()?;
        copy_tree(&root, sandbox.workdir())?;
        Ok(sandbox)
    }

    /// A sandbox holding a single file and nothing else.
    pub fn gist_only(&self, filename: &str, content: &str) -> Result<SandboxHandle, SandboxError> {
        let sandbox = self.empty()?;
        sandbox.write_file(filename, content)?;
        Ok(sandbox)
    }

    pub fn empty(&self) -> Result<SandboxHandle, SandboxError> {
        let dir = tempfile::Builder::new()
            .prefix("gistify-")
            .tempdir()
            .map_err(|e| SandboxError::io("create scratch dir", e))?;
        let mut env = self.config.env.clone();
        env.entry("COLUMNS".into()).or_insert_with(|| "80".into());
        env.entry("PYTHONDONTWRITEBYTECODE".into()).or_insert_with(|| "1".into());
        env.entry("PYTHONHASHSEED".into()).or_insert_with(|| "0".into());
        if let Some(tools) = &self.tools {
            let path = std::env::var("PATH").unwrap_or_default();
            env.insert("PATH".into(), format!("{}:{path}", tools.path().display()));
        }
        Ok(SandboxHandle {
            dir,
            image_ref: self.config.image_ref.clone(),
            shim_dir: self.config.shim_dir.clone(),
            env,
            timeout: self.config.timeout,
        })
    }
}

/// Provides `python` on PATH when only `python3` is installed, so entrypoints
/// can use the conventional `python -m pytest` form.
fn python_alias_dir() -> Option<TempDir> {
    let on_path = |name: &str| {
        std::env::var_os("PATH")
            .and_then(|p| std::env::split_paths(&p).map(|d| d.join(name)).find(|c| c.is_file()))
    };
    if on_path("python").is_some() {
        return None;
    }
    let python3 = on_path("python3")?;
    let dir = tempfile::Builder::new().prefix("gistify-tools-").tempdir().ok()?;
    std::os::unix::fs::symlink(python3, dir.path().join("python")).ok()?;
    Some(dir)
}

fn copy_tree(src: &Path, dst: &Path) -> Result<(), SandboxError> {
    let skip = |name: &str| matches!(name, ".git" | "__pycache__" | ".pytest_cache" | ".mypy_cache");
    let walker = WalkDir::new(src)
        .min_depth(1)
        .into_iter()
        .filter_entry(|e| !skip(&e.file_name().to_string_lossy()));
    for entry in walker {
        let entry = entry.map_err(|e| SandboxError::SetupFailed(format!("walk {}: {e}", src.display())))?;
        let rel = entry.path().strip_prefix(src).expect("walkdir yields children");
        let target = dst.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target).map_err(|e| SandboxError::io(target.display(), e))?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path()).map_err(|e| SandboxError::io(entry.path().display(), e))?;
            std::os::unix::fs::symlink(link, &target).map_err(|e| SandboxError::io(target.display(), e))?;
        } else {
            fs::copy(entry.path(), &target).map_err(|e| SandboxError::io(target.display(), e))?;
        }
    }
    Ok(())
}

/// An isolated working directory. Removed when dropped.
#[derive(Debug)]
pub struct SandboxHandle {
    dir: TempDir,
    image_ref: Option<String>,
    shim_dir: Option<PathBuf>,
    env: BTreeMap<String, String>,
    timeout: Duration,
}

impl SandboxHandle {
    pub fn workdir(&self) -> &Path {
        self.dir.path()
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        assert!(!timeout.is_zero(), "timeout must be positive");
        self.timeout = timeout;
    }

    pub fn set_env(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.env.insert(key.into(), value.into());
    }

    pub fn write_file(&self, rel: &str, content: &str) -> Result<PathBuf, SandboxError> {
        let path = self.workdir().join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| SandboxError::io(parent.display(), e))?;
        }
        fs::write(&path, content).map_err(|e| SandboxError::io(path.display(), e))?;
        Ok(path)
    }

    /// Path of the sandbox root as seen by the command.
    pub fn visible_root(&self) -> PathBuf {
        if self.image_ref.is_some() {
            PathBuf::from(CONTAINER_WORKDIR)
        } else {
            self.workdir().to_path_buf()
        }
    }

    /// Builds the process for `command`, either directly or inside a container.
    pub(crate) fn build_command(&self, command: &str, extra_env: &BTreeMap<String, String>, trace_dir: Option<&Path>) -> Command {
        let mut env = self.env.clone();
        env.extend(extra_env.iter().map(|(k, v)| (k.clone(), v.clone())));
        match &self.image_ref {
            None => {
                let mut cmd = Command::new("sh");
                cmd.arg("-c").arg(command).current_dir(self.workdir());
                cmd.env_remove("PYTHONPATH");
                cmd.envs(&env);
                cmd
            }
            Some(image) => {
                let mut cmd = Command::new("docker");
                cmd.args(["run", "--rm", "-v"])
                    .arg(format!("{}:{CONTAINER_WORKDIR}", self.workdir().display()))
                    .args(["-w", CONTAINER_WORKDIR]);
                if let Some(dir) = trace_dir {
                    cmd.arg("-v").arg(format!("{}:{CONTAINER_TRACE_DIR}", dir.display()));
                }
                if let Some(shim) = &self.shim_dir {
                    cmd.arg("-v").arg(format!("{}:{CONTAINER_SHIM_DIR}:ro", shim.display()));
                }
                for (k, v) in &env {
                    if k == "PATH" {
                        continue;
                    }
                    cmd.arg("-e").arg(format!("{k}={v}"));
                }
                cmd.arg(image).args(["sh", "-c", command]);
                cmd
            }
        }
    }
}

/// Pass/fail tallies from a test-runner summary line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCounts {
    pub passed: u32,
    pub failed: u32,
    pub errored: u32,
    pub skipped: u32,
    pub xfailed: u32,
    pub xpassed: u32,
    pub collected: Option<u32>,
}

impl TestCounts {
    /// Counts that must agree between two runs for them to be consistent.
    pub fn outcome_key(&self) -> (u32, u32, u32, u32, u32, u32) {
        (self.passed, self.failed, self.errored, self.skipped, self.xfailed, self.xpassed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_secs: f64,
    pub counts: Option<TestCounts>,
    pub timed_out: bool,
}

impl RunOutcome {
    /// The command ran to completion without crashing: the test runner
    /// reported results (exit 0 or 1) before its deadline.
    pub fn ran(&self) -> bool {
        !self.timed_out && matches!(self.exit_status, 0 | 1) && self.counts.is_some()
    }

    pub fn succeeded(&self) -> bool {
        !self.timed_out && self.exit_status == 0
    }
}

static SUMMARY_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+) (passed|failed|errors?|skipped|xfailed|xpassed|deselected|warnings?)").unwrap());
static SUMMARY_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^=*\s*(?:\d+ (?:passed|failed|errors?|skipped|xfailed|xpassed|deselected|warnings?)(?:, )?)+.* in [\d.]+s").unwrap()
});
static NO_TESTS_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^=*\s*no tests ran in [\d.]+s").unwrap());
static COLLECTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^collected (\d+) items?").unwrap());

/// Extracts pass/fail counts from test-runner output. Absent summary yields
/// `None`.
pub fn parse_test_summary(stdout: &str) -> Option<TestCounts> {
    let collected = stdout
        .lines()
        .find_map(|l| COLLECTED.captures(l.trim()))
        .and_then(|c| c[1].parse().ok());
    let line = stdout
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| SUMMARY_LINE.is_match(l) || NO_TESTS_LINE.is_match(l))?;
    let mut counts = TestCounts {
        collected,
        ..TestCounts::default()
    };
    for cap in SUMMARY_ITEM.captures_iter(line) {
        let n: u32 = cap[1].parse().ok()?;
        match &cap[2] {
            "passed" => counts.passed = n,
            "failed" => counts.failed = n,
            "error" | "errors" => counts.errored = n,
            "skipped" => counts.skipped = n,
            "xfailed" => counts.xfailed = n,
            "xpassed" => counts.xpassed = n,
            _ => {}
        }
    }
    Some(counts)
}

/// Runs `command` in the sandbox and captures everything it prints.
pub fn run_command(sandbox: &SandboxHandle, command: &str) -> Result<RunOutcome, SandboxError> {
    run_inner(sandbox, command, &BTreeMap::new(), None)
}

fn run_inner(
    sandbox: &SandboxHandle,
    command: &str,
    extra_env: &BTreeMap<String, String>,
    trace_dir: Option<&Path>,
) -> Result<RunOutcome, SandboxError> {
    if command.trim().is_empty() {
        return Err(SandboxError::EmptyCommand);
    }
    let mut cmd = sandbox.build_command(command, extra_env, trace_dir);
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let started = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| SandboxError::io(format!("spawn `{command}`"), e))?;
    let pid = child.id() as i32;
    let mut out_pipe = child.stdout.take().expect("piped stdout");
    let mut err_pipe = child.stderr.take().expect("piped stderr");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let deadline = started + sandbox.timeout;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                timed_out = true;
                // SAFETY: signalling the process group we created above.
                unsafe {
                    libc::killpg(pid, libc::SIGKILL);
                }
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(SandboxError::io("wait", e)),
        }
    };
    // Reap stragglers that kept the pipes open after the shell exited.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
    let exit_status = if timed_out {
        TIMEOUT_EXIT
    } else {
        status.map(exit_code).unwrap_or(-1)
    };
    let counts = parse_test_summary(&stdout);
    Ok(RunOutcome {
        exit_status,
        counts,
        stdout,
        stderr,
        duration_secs: started.elapsed().as_secs_f64(),
        timed_out,
    })
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

/// Runs `command` with the tracer attached and loads the resulting trace.
/// A missing or empty trace is returned alongside the outcome, not as a
/// failure of the run.
pub fn run_with_trace(
    sandbox: &SandboxHandle,
    command: &str,
    scope_root: &Path,
) -> Result<(RunOutcome, Result<ExecutionTrace, TraceError>), SandboxError> {
    let shim = sandbox
        .shim_dir
        .clone()
        .ok_or_else(|| SandboxError::SetupFailed("no tracer hook configured".into()))?;
    let trace_dir = tempfile::Builder::new()
        .prefix("gistify-trace-")
        .tempdir()
        .map_err(|e| SandboxError::io("create trace dir", e))?;
    let mut env = BTreeMap::new();
    let containerized = sandbox.image_ref.is_some();
    let (out, shim_path, scope) = if containerized {
        let rel = scope_root.strip_prefix(sandbox.workdir()).unwrap_or(Path::new(""));
        (
            PathBuf::from(CONTAINER_TRACE_DIR),
            PathBuf::from(CONTAINER_SHIM_DIR),
            Path::new(CONTAINER_WORKDIR).join(rel),
        )
    } else {
        (trace_dir.path().to_path_buf(), shim, scope_root.to_path_buf())
    };
    env.insert(TRACE_OUT_ENV.to_string(), out.display().to_string());
    env.insert(TRACE_SCOPE_ENV.to_string(), scope.display().to_string());
    env.insert("PYTHONPATH".to_string(), shim_path.display().to_string());
    let outcome = run_inner(sandbox, command, &env, Some(trace_dir.path()))?;
    let trace = load_trace(trace_dir.path(), Some(&scope)).map(|t| {
        if containerized {
            t.rebase(Path::new(CONTAINER_WORKDIR), sandbox.workdir())
        } else {
            t
        }
    });
    Ok((outcome, trace))
}
