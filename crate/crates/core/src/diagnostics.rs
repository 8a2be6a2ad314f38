//! Failure categories and task difficulty.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use rustpython_parser::ast;
use rustpython_parser::Parse;
use serde::{Deserialize, Serialize};

use crate::integrate::{GistCandidate, TestSource};
use crate::trace::ExecutionTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCategory {
    FileCreationFailure,
    ImportError,
    MissingTestFunction,
    RuntimeError,
    None,
}

impl ErrorCategory {
    pub const FAILURES: [ErrorCategory; 4] = [
        ErrorCategory::ImportError,
        ErrorCategory::FileCreationFailure,
        ErrorCategory::MissingTestFunction,
        ErrorCategory::RuntimeError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::FileCreationFailure => "file-creation-failure",
            ErrorCategory::ImportError => "import-error",
            ErrorCategory::MissingTestFunction => "missing-test-function",
            ErrorCategory::RuntimeError => "runtime-error",
            ErrorCategory::None => "none",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Categorization {
    pub category: ErrorCategory,
    /// Repository packages the gist imports.
    pub repo_imports: Vec<String>,
    /// Repository package names the gist run resolved anyway, meaning an
    /// installed package of the same name shadows the check.
    pub name_collisions: Vec<String>,
}

/// Assigns a failed task to exactly one category. The first matching rule
/// wins: no file, repository import, missing test, anything else.
pub fn categorize_failure(
    gist: Option<&GistCandidate>,
    package_names: &BTreeSet<String>,
    test: &TestSource,
    fidelity: u8,
    gist_output: Option<&str>,
) -> Categorization {
    let mut result = Categorization {
        category: ErrorCategory::None,
        repo_imports: Vec::new(),
        name_collisions: Vec::new(),
    };
    let Some(gist) = gist else {
        if fidelity == 0 {
            result.category = ErrorCategory::FileCreationFailure;
        }
        return result;
    };
    result.repo_imports = imported_top_level_names(gist)
        .into_iter()
        .filter(|n| package_names.contains(n))
        .collect();
    if let Some(output) = gist_output {
        result.name_collisions = result
            .repo_imports
            .iter()
            .filter(|n| !output.contains(&format!("No module named '{n}")))
            .cloned()
            .collect();
    }
    if fidelity == 1 {
        return result;
    }
    result.category = if !result.repo_imports.is_empty() {
        ErrorCategory::ImportError
    } else if !defines_function(gist, &test.node.function_name) {
        ErrorCategory::MissingTestFunction
    } else {
        ErrorCategory::RuntimeError
    };
    result
}

static IMPORT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:from\s+([A-Za-z_]\w*)|import\s+([A-Za-z_][\w\s,.]*))").unwrap());

/// First components of absolute imports anywhere in the file.
pub fn imported_top_level_names(gist: &GistCandidate) -> BTreeSet<String> {
    match ast::Suite::parse(&gist.content, "<gist>") {
        Ok(suite) => {
            let mut names = BTreeSet::new();
            collect_imports(&suite, &mut names);
            names
        }
        Err(_) => {
            let mut names = BTreeSet::new();
            for cap in gist.content.lines().filter_map(|l| IMPORT_LINE.captures(l)) {
                if let Some(m) = cap.get(1) {
                    names.insert(m.as_str().to_string());
                } else if let Some(m) = cap.get(2) {
                    for part in m.as_str().split(',') {
                        if let Some(first) = part.trim().split(['.', ' ']).next().filter(|s| !s.is_empty()) {
                            names.insert(first.to_string());
                        }
                    }
                }
            }
            names
        }
    }
}

fn collect_imports(stmts: &[ast::Stmt], names: &mut BTreeSet<String>) {
    fn add(names: &mut BTreeSet<String>, dotted: &str) {
        names.insert(dotted.split('.').next().unwrap_or_default().to_string());
    }
    for stmt in stmts {
        match stmt {
            ast::Stmt::Import(s) => s.names.iter().for_each(|a| add(names, a.name.as_str())),
            ast::Stmt::ImportFrom(s) => {
                if let (0, Some(module)) = (s.level.map(|l| l.to_usize()).unwrap_or(0), &s.module) {
                    add(names, module.as_str());
                }
            }
            ast::Stmt::FunctionDef(s) => collect_imports(&s.body, names),
            ast::Stmt::AsyncFunctionDef(s) => collect_imports(&s.body, names),
            ast::Stmt::ClassDef(s) => collect_imports(&s.body, names),
            ast::Stmt::If(s) => {
                collect_imports(&s.body, names);
                collect_imports(&s.orelse, names);
            }
            ast::Stmt::For(s) => {
                collect_imports(&s.body, names);
                collect_imports(&s.orelse, names);
            }
            ast::Stmt::AsyncFor(s) => {
                collect_imports(&s.body, names);
                collect_imports(&s.orelse, names);
            }
            ast::Stmt::While(s) => {
                collect_imports(&s.body, names);
                collect_imports(&s.orelse, names);
            }
            ast::Stmt::With(s) => collect_imports(&s.body, names),
            ast::Stmt::AsyncWith(s) => collect_imports(&s.body, names),
            ast::Stmt::Try(s) => {
                collect_imports(&s.body, names);
                for ast::ExceptHandler::ExceptHandler(h) in &s.handlers {
                    collect_imports(&h.body, names);
                }
                collect_imports(&s.orelse, names);
                collect_imports(&s.finalbody, names);
            }
            ast::Stmt::TryStar(s) => {
                collect_imports(&s.body, names);
                for ast::ExceptHandler::ExceptHandler(h) in &s.handlers {
                    collect_imports(&h.body, names);
                }
                collect_imports(&s.orelse, names);
                collect_imports(&s.finalbody, names);
            }
            ast::Stmt::Match(s) => s.cases.iter().for_each(|c| collect_imports(&c.body, names)),
            _ => {}
        }
    }
}

fn defines_function(gist: &GistCandidate, name: &str) -> bool {
    match &gist.parsed {
        Some(p) => p
            .tree
            .blocks
            .iter()
            .any(|b| b.kind == crate::source::BlockKind::Function && b.name.as_deref() == Some(name)),
        None => {
            let re = Regex::new(&format!(r"(?m)^\s*(?:async\s+)?def\s+{}\s*\(", regex::escape(name))).expect("valid");
            re.is_match(&gist.content)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyStats {
    pub call_count: usize,
    pub unique_files: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("trace holds no call events")]
pub struct EmptyTrace;

pub fn trace_difficulty(trace: &ExecutionTrace) -> Result<DifficultyStats, EmptyTrace> {
    if trace.call_count == 0 {
        return Err(EmptyTrace);
    }
    Ok(DifficultyStats {
        call_count: trace.call_count,
        unique_files: trace.unique_files,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardCandidate {
    pub task_id: String,
    pub node_id: String,
    pub stats: DifficultyStats,
}

/// Union of the `k` longest traces and the `k` traces touching the most
/// files. Ties fall to the smaller node id. Output is sorted by node id.
pub fn select_hard_subset(tasks: &[HardCandidate], k: usize) -> Vec<HardCandidate> {
    if k >= tasks.len() {
        if k > tasks.len() {
            log::warn!("k = {k} exceeds the {} available tasks; selecting all", tasks.len());
        }
        let mut all = tasks.to_vec();
        all.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        return all;
    }
    let top = |key: fn(&DifficultyStats) -> usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.sort_by(|&a, &b| {
            key(&tasks[b].stats)
                .cmp(&key(&tasks[a].stats))
                .then_with(|| tasks[a].node_id.cmp(&tasks[b].node_id))
        });
        order.truncate(k);
        order
    };
    let chosen: HashSet<usize> = top(|s| s.call_count).into_iter().chain(top(|s| s.unique_files)).collect();
    let mut out: Vec<HardCandidate> = chosen.into_iter().map(|i| tasks[i].clone()).collect();
    out.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    out
}
