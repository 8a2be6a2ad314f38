//! Turning a repository into task descriptors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::par;
use crate::sandbox::{run_command, Runner, SandboxError};

pub const DEFAULT_GIST_FILENAME: &str = "concise.py";
pub const DEFAULT_WORKING_DIR: &str = "/app";
/// Where a test file is copied to check whether it depends on its location.
pub const RELOCATION_DIR: &str = ".gistify_relocated";

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("repository {0} does not exist")]
    RepoNotFound(PathBuf),
    #[error("repository {0} contains no python source files")]
    NoSources(PathBuf),
    #[error("repository {0} defines no importable packages or modules")]
    NoPackages(PathBuf),
    #[error("test collection failed with exit status {status}: {detail}")]
    CollectionFailed { status: i32, detail: String },
    #[error("malformed test node id `{0}`")]
    BadNodeId(String),
    #[error("unknown prompt template `{0}` (expected base, reading or tracing)")]
    UnknownTemplate(String),
    #[error("descriptor {path}: {message}")]
    BadDescriptor { path: PathBuf, message: String },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepositoryRef {
    pub root_path: PathBuf,
    pub image_ref: Option<String>,
    pub package_names: BTreeSet<String>,
}

impl RepositoryRef {
    /// Inspects a checkout and records the names it makes importable.
    pub fn scan(root: &Path, image_ref: Option<String>) -> Result<Self, TaskError> {
        if !root.is_dir() {
            return Err(TaskError::RepoNotFound(root.to_path_buf()));
        }
        let root_path = root.canonicalize().map_err(io_err(root))?;
        let has_sources = WalkDir::new(&root_path)
            .into_iter()
            .filter_entry(|e| !is_ignored_dir(&e.file_name().to_string_lossy()))
            .filter_map(Result::ok)
            .any(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "py"));
        if !has_sources {
            return Err(TaskError::NoSources(root_path));
        }
        let mut package_names = top_level_names(&root_path)?;
        let src = root_path.join("src");
        if src.is_dir() {
            package_names.extend(top_level_names(&src)?);
        }
        if package_names.is_empty() {
            return Err(TaskError::NoPackages(root_path));
        }
        Ok(RepositoryRef {
            root_path,
            image_ref,
            package_names,
        })
    }

    /// Directory name of the checkout.
    pub fn name(&self) -> String {
        self.root_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "repo".into())
    }
}

fn is_ignored_dir(name: &str) -> bool {
    name.starts_with('.') || matches!(name, "__pycache__" | "node_modules" | "build" | "dist")
}

fn top_level_names(dir: &Path) -> Result<BTreeSet<String>, TaskError> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let Some(name) = path.file_name().map(|n| n.to_string_lossy().into_owned()) else {
            continue;
        };
        if path.is_dir() {
            if !is_ignored_dir(&name) && path.join("__init__.py").is_file() && is_identifier(&name) {
                names.insert(name);
            }
        } else if let Some(stem) = name.strip_suffix(".py") {
            if !matches!(stem, "setup" | "conftest" | "noxfile") && is_identifier(stem) {
                names.insert(stem.to_string());
            }
        }
    }
    Ok(names)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

/// One collected test, `file::Class::function[param]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TestCase {
    pub node_id: String,
    pub file: String,
    /// Enclosing classes, outermost first, joined with `::`.
    pub class_name: Option<String>,
    pub function_name: String,
    pub param_id: Option<String>,
}

impl TestCase {
    pub fn parse(node_id: &str) -> Result<Self, TaskError> {
        let bad = || TaskError::BadNodeId(node_id.to_string());
        let (prefix, param_id) = match node_id.find('[') {
            Some(i) if node_id.ends_with(']') => (&node_id[..i], Some(node_id[i + 1..node_id.len() - 1].to_string())),
            Some(_) => return Err(bad()),
            None => (node_id, None),
        };
        let parts: Vec<&str> = prefix.split("::").collect();
        if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(bad());
        }
        let file = parts[0].to_string();
        let function_name = parts[parts.len() - 1].to_string();
        let classes = &parts[1..parts.len() - 1];
        Ok(TestCase {
            node_id: node_id.to_string(),
            file,
            class_name: (!classes.is_empty()).then(|| classes.join("::")),
            function_name,
            param_id,
        })
    }

    pub fn classes(&self) -> Vec<String> {
        self.class_name
            .as_deref()
            .map(|c| c.split("::").map(str::to_string).collect())
            .unwrap_or_default()
    }

    /// The node id after the file component, e.g. `TestX::test_y`.
    pub fn qualified_name(&self) -> String {
        match &self.class_name {
            Some(c) => format!("{c}::{}", self.function_name),
            None => self.function_name.clone(),
        }
    }

    pub fn base_node_id(&self) -> String {
        format!("{}::{}", self.file, self.qualified_name())
    }

    /// Node id of the same test inside another file.
    pub fn node_id_in(&self, file: &str) -> String {
        let mut id = format!("{file}::{}", self.qualified_name());
        if let Some(p) = &self.param_id {
            id.push_str(&format!("[{p}]"));
        }
        id
    }

    pub fn base(&self) -> TestCase {
        TestCase::parse(&self.base_node_id()).expect("base id of a parsed id parses")
    }

    fn group_key(&self) -> (&str, Option<&str>, &str) {
        (&self.file, self.class_name.as_deref(), &self.function_name)
    }
}

impl fmt::Display for TestCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.node_id_in(&self.file))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Base,
    Reading,
    Tracing,
}

impl Template {
    fn text(self) -> String {
        const BASE: &str = include_str!("../templates/base.txt");
        match self {
            Template::Base => BASE.to_string(),
            Template::Reading => format!("{BASE}{}", include_str!("../templates/reading.txt")),
            Template::Tracing => format!("{BASE}{}", include_str!("../templates/tracing.txt")),
        }
    }
}

impl FromStr for Template {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Template::Base),
            "reading" => Ok(Template::Reading),
            "tracing" => Ok(Template::Tracing),
            other => Err(TaskError::UnknownTemplate(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub repo: RepositoryRef,
    pub entrypoint: String,
    pub base_test: TestCase,
    pub variants: Vec<TestCase>,
    pub prompt: String,
    pub gist_filename: String,
}

impl TaskSpec {
    pub fn task_id(&self) -> String {
        slug(&self.repo.name(), &self.base_test)
    }

    pub fn descriptor(&self) -> TaskDescriptor {
        TaskDescriptor {
            repo_root: self.repo.root_path.clone(),
            image_ref: self.repo.image_ref.clone(),
            entrypoint: self.entrypoint.clone(),
            base_node_id: self.base_test.node_id.clone(),
            variant_node_ids: self.variants.iter().map(|v| v.node_id.clone()).collect(),
            prompt: self.prompt.clone(),
            gist_filename: self.gist_filename.clone(),
        }
    }
}

pub fn pytest_command(node_id: &str) -> String {
    format!("python -m pytest {}", shell_quote(node_id))
}

fn shell_quote(s: &str) -> String {
    if s.chars().all(|c| c.is_ascii_alphanumeric() || "_-./:".contains(c)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

/// File-system safe identifier: `<repo>__tests_test_core__TestX__test_y`.
pub fn slug(repo_name: &str, test: &TestCase) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
            .collect()
    };
    let file = test.file.strip_suffix(".py").unwrap_or(&test.file);
    let mut parts = vec![clean(repo_name), clean(file)];
    parts.extend(test.classes().iter().map(|c| clean(c)));
    parts.push(clean(&test.function_name));
    parts.join("__")
}

/// Collects every test node id in the repository without running test
/// bodies.
pub fn discover_tests(repo: &RepositoryRef, runner: &Runner) -> Result<Vec<TestCase>, TaskError> {
    let sandbox = runner.from_repo(&repo.root_path)?;
    let outcome = run_command(&sandbox, "python -m pytest --collect-only -q -p no:cacheprovider")?;
    match outcome.exit_status {
        0 => parse_collection(&outcome.stdout),
        5 => Ok(Vec::new()),
        status => Err(TaskError::CollectionFailed {
            status,
            detail: tail(&format!("{}{}", outcome.stdout, outcome.stderr), 20),
        }),
    }
}

fn tail(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

/// Parses quiet collection output: node ids up to the first blank line.
pub fn parse_collection(stdout: &str) -> Result<Vec<TestCase>, TaskError> {
    stdout
        .lines()
        .take_while(|l| !l.trim().is_empty())
        .filter(|l| l.contains("::"))
        .map(|l| TestCase::parse(l.trim()))
        .collect()
}

/// One draft per (file, class, function), in first-seen order.
pub fn group_parameterized(repo: &RepositoryRef, tests: &[TestCase]) -> Vec<TaskSpec> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(&str, Option<&str>, &str), Vec<TestCase>> = BTreeMap::new();
    for t in tests {
        let key = t.group_key();
        let entry = groups.entry(key).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(t.clone());
    }
    order
        .into_iter()
        .map(|key| {
            let variants = groups.remove(&key).expect("grouped key");
            let base_test = variants[0].base();
            TaskSpec {
                repo: repo.clone(),
                entrypoint: pytest_command(&base_test.node_id),
                base_test,
                variants,
                prompt: String::new(),
                gist_filename: DEFAULT_GIST_FILENAME.to_string(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    BaselineFailed,
    LocationDependent,
    HarnessError,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExcludedTask {
    pub base_node_id: String,
    pub reason: Exclusion,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct FilterResult {
    pub retained: Vec<TaskSpec>,
    pub excluded: Vec<ExcludedTask>,
}

/// Keeps drafts that pass both in place and when their test file is run from
/// a relocated copy, with the repository still importable.
pub fn filter_environment_dependent(drafts: Vec<TaskSpec>, runner: &Runner) -> FilterResult {
    let verdicts = par::map(&drafts, |d| check_location(d, runner));
    let mut result = FilterResult::default();
    for (draft, verdict) in drafts.into_iter().zip(verdicts) {
        match verdict {
            None => result.retained.push(draft),
            Some((reason, detail)) => {
                log::info!("excluding {}: {reason:?}: {detail}", draft.base_test.node_id);
                result.excluded.push(ExcludedTask {
                    base_node_id: draft.base_test.node_id.clone(),
                    reason,
                    detail,
                });
            }
        }
    }
    result
}

fn check_location(draft: &TaskSpec, runner: &Runner) -> Option<(Exclusion, String)> {
    let harness = |e: &dyn fmt::Display| Some((Exclusion::HarnessError, e.to_string()));
    let sandbox = match runner.from_repo(&draft.repo.root_path) {
        Ok(s) => s,
        Err(e) => return harness(&e),
    };
    let in_situ = match run_command(&sandbox, &draft.entrypoint) {
        Ok(o) => o,
        Err(e) => return harness(&e),
    };
    if !in_situ.succeeded() || in_situ.counts.is_none() {
        return Some((
            Exclusion::BaselineFailed,
            format!("exit status {}: {}", in_situ.exit_status, tail(&in_situ.stdout, 3)),
        ));
    }
    let relocated = match relocate(sandbox.workdir(), &draft.base_test) {
        Ok(p) => p,
        Err(e) => return harness(&e),
    };
    let moved = match run_command(&sandbox, &pytest_command(&draft.base_test.node_id_in(&relocated))) {
        Ok(o) => o,
        Err(e) => return harness(&e),
    };
    let same = moved.succeeded() && moved.counts.map(|c| c.outcome_key()) == in_situ.counts.map(|c| c.outcome_key());
    (!same).then(|| {
        (
            Exclusion::LocationDependent,
            format!("relocated run exit status {}: {}", moved.exit_status, tail(&moved.stdout, 3)),
        )
    })
}

/// Copies the test file, and the nearest `conftest.py` below the root, into
/// the relocation directory. Returns the copy's path relative to `workdir`.
fn relocate(workdir: &Path, test: &TestCase) -> Result<String, TaskError> {
    let source = workdir.join(&test.file);
    let dest_dir = workdir.join(RELOCATION_DIR);
    fs::create_dir_all(&dest_dir).map_err(io_err(&dest_dir))?;
    let name = source
        .file_name()
        .ok_or_else(|| TaskError::BadNodeId(test.node_id.clone()))?
        .to_owned();
    let dest = dest_dir.join(&name);
    fs::copy(&source, &dest).map_err(io_err(&source))?;
    let mut dir = source.parent();
    while let Some(d) = dir {
        if d == workdir {
            break;
        }
        let conftest = d.join("conftest.py");
        if conftest.is_file() {
            let target = dest_dir.join("conftest.py");
            fs::copy(&conftest, &target).map_err(io_err(&conftest))?;
            break;
        }
        dir = d.parent();
    }
    Ok(format!("{RELOCATION_DIR}/{}", name.to_string_lossy()))
}

/// Substitutes the template placeholders for a draft.
pub fn render_prompt(draft: &TaskSpec, template: Template, working_dir: &str) -> String {
    template
        .text()
        .replace("{working dir}", working_dir)
        .replace("{problem statement}", &draft.entrypoint)
}

/// A task as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescriptor {
    pub repo_root: PathBuf,
    pub image_ref: Option<String>,
    pub entrypoint: String,
    pub base_node_id: String,
    pub variant_node_ids: Vec<String>,
    pub prompt: String,
    pub gist_filename: String,
}

impl TaskDescriptor {
    /// Reads a descriptor; a relative `repo_root` is taken relative to the
    /// descriptor's directory.
    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut desc: TaskDescriptor = serde_json::from_str(&text).map_err(|e| TaskError::BadDescriptor {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if desc.repo_root.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            desc.repo_root = base.join(&desc.repo_root);
        }
        desc.validate().map_err(|message| TaskError::BadDescriptor {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(desc)
    }

    fn validate(&self) -> Result<(), String> {
        let base = TestCase::parse(&self.base_node_id).map_err(|e| e.to_string())?;
        if base.param_id.is_some() {
            return Err("base_node_id carries a parameter suffix".into());
        }
        if self.variant_node_ids.is_empty() {
            return Err("no variants".into());
        }
        for v in &self.variant_node_ids {
            let v = TestCase::parse(v).map_err(|e| e.to_string())?;
            if v.group_key() != base.group_key() {
                return Err(format!("variant {} does not belong to {}", v.node_id, base.node_id));
            }
        }
        if !self.entrypoint.contains(&self.base_node_id) {
            return Err("entrypoint does not reference base_node_id".into());
        }
        if self.gist_filename.is_empty() || self.gist_filename.contains('/') {
            return Err("gist_filename must be a bare file name".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskError> {
        let text = serde_json::to_string_pretty(self).expect("descriptor serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn base_test(&self) -> TestCase {
        TestCase::parse(&self.base_node_id).expect("validated on load")
    }

    pub fn variants(&self) -> Vec<TestCase> {
        self.variant_node_ids
            .iter()
            .map(|v| TestCase::parse(v).expect("validated on load"))
            .collect()
    }

    pub fn repo_name(&self) -> String {
        let root = self.repo_root.canonicalize().unwrap_or_else(|_| self.repo_root.clone());
        root.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "repo".into())
    }

    pub fn task_id(&self) -> String {
        slug(&self.repo_name(), &self.base_test())
    }

    /// The entrypoint retargeted at the gist file.
    pub fn gist_entrypoint(&self) -> String {
        let base = self.base_test();
        self.entrypoint
            .replacen(&self.base_node_id, &base.node_id_in(&self.gist_filename), 1)
    }
}

/// Full pipeline: scan, collect, group, filter, render. Writes one JSON file
/// per retained task into `out_dir` and returns the retained specs.
pub fn build_tasks(
    repo: &RepositoryRef,
    runner: &Runner,
    template: Template,
    working_dir: &str,
    out_dir: &Path,
) -> Result<(Vec<TaskSpec>, Vec<ExcludedTask>), TaskError> {
    let tests = discover_tests(repo, runner)?;
    let drafts = group_parameterized(repo, &tests);
    let FilterResult { retained, excluded } = filter_environment_dependent(drafts, runner);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut specs = Vec::with_capacity(retained.len());
    for mut spec in retained {
        spec.prompt = render_prompt(&spec, template, working_dir);
        spec.descriptor().save(&out_dir.join(format!("{}.json", spec.task_id())))?;
        specs.push(spec);
    }
    Ok((specs, excluded))
}
