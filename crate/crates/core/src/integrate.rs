//! Putting the original test back into a candidate gist, and measuring how
//! much of it the candidate preserved.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::source::{CodeBlock, ParsedSource, SourceError};
use crate::task::TestCase;

#[derive(Debug, thiserror::Error)]
pub enum IntegrationError {
    #[error("test {0} not found in repository")]
    TestNotFoundInRepo(String),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The original test function as it appears in the repository.
#[derive(Clone, Debug)]
pub struct TestSource {
    pub node: TestCase,
    /// Function block with its decorators.
    pub block: CodeBlock,
    pub enclosing_class: Option<String>,
    /// Normalized lines of the function and anything nested in it.
    pub lines: Vec<String>,
}

impl TestSource {
    fn class_chain(&self) -> Vec<String> {
        self.node.classes()
    }
}

pub fn locate_test_function(repo_root: &Path, node: &TestCase) -> Result<TestSource, IntegrationError> {
    let path = repo_root.join(&node.file);
    let text = fs::read_to_string(&path).map_err(|source| IntegrationError::Io {
        path: path.clone(),
        source,
    })?;
    let parsed = ParsedSource::parse(&text, Path::new(&node.file))?;
    let chain = node.classes();
    let idx = last_function(&parsed, &node.function_name, &chain)
        .ok_or_else(|| IntegrationError::TestNotFoundInRepo(node.node_id.clone()))?;
    Ok(TestSource {
        node: node.clone(),
        block: parsed.tree.blocks[idx].clone(),
        enclosing_class: chain.last().cloned(),
        lines: parsed.tree.subtree_lines(idx),
    })
}

/// The definition that wins at runtime when a name is bound more than once.
fn last_function(parsed: &ParsedSource, name: &str, chain: &[String]) -> Option<usize> {
    parsed.tree.blocks.iter().rposition(|b| {
        b.kind == crate::source::BlockKind::Function && b.name.as_deref() == Some(name) && b.parent_chain == chain
    })
}

/// A solver's output file.
#[derive(Clone, Debug)]
pub struct GistCandidate {
    pub path: PathBuf,
    pub content: String,
    /// Absent when the file does not parse.
    pub parsed: Option<ParsedSource>,
}

impl GistCandidate {
    pub fn new(path: impl Into<PathBuf>, content: impl Into<String>) -> Self {
        let path = path.into();
        let content = content.into();
        let parsed = ParsedSource::parse(&content, &path).ok();
        GistCandidate { path, content, parsed }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(GistCandidate::new(path, fs::read_to_string(path)?))
    }

    pub fn parse_error(&self) -> Option<SourceError> {
        ParsedSource::parse(&self.content, &self.path).err()
    }
}

/// How the original test ended up in the gist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integration {
    /// A same-named function in the same class context was replaced.
    Replaced,
    /// Appended into a class the gist already defines.
    AppendedToClass,
    /// Appended inside newly created class shells.
    AppendedWithShell,
    AppendedTopLevel,
    /// The gist does not parse; the test was appended as text.
    TextualAppend,
}

#[derive(Clone, Debug)]
pub struct Integrated {
    pub gist: GistCandidate,
    pub how: Integration,
}

const INDENT_STEP: &str = "    ";

pub fn integrate_original_test(gist: &GistCandidate, test: &TestSource) -> Integrated {
    let mut lines: Vec<String> = gist.content.lines().map(str::to_string).collect();
    let chain = test.class_chain();
    let how = match &gist.parsed {
        None => {
            append_at_end(&mut lines, shell_and_block(test, &chain, ""));
            Integration::TextualAppend
        }
        Some(parsed) => {
            if let Some(idx) = last_function(parsed, &test.node.function_name, &chain) {
                let target = &parsed.tree.blocks[idx];
                let start = target.span.start as usize - 1;
                let end = target.span.end as usize;
                lines.splice(start..end, test.block.reindented(target.indent()));
                Integration::Replaced
            } else {
                let (depth, class_idx) = deepest_class(parsed, &chain);
                match class_idx {
                    None => {
                        append_at_end(&mut lines, shell_and_block(test, &chain, ""));
                        if chain.is_empty() {
                            Integration::AppendedTopLevel
                        } else {
                            Integration::AppendedWithShell
                        }
                    }
                    Some(ci) => {
                        let class = &parsed.tree.blocks[ci];
                        let indent = body_indent(&lines, class);
                        let mut insert = vec![String::new()];
                        insert.extend(shell_and_block(test, &chain[depth..], &indent));
                        let at = class.span.end as usize;
                        lines.splice(at..at, insert);
                        if depth == chain.len() {
                            Integration::AppendedToClass
                        } else {
                            Integration::AppendedWithShell
                        }
                    }
                }
            }
        }
    };
    let mut content = lines.join("\n");
    content.push('\n');
    Integrated {
        gist: GistCandidate::new(gist.path.clone(), content),
        how,
    }
}

/// Longest prefix of `chain` that the gist defines as nested classes.
fn deepest_class(parsed: &ParsedSource, chain: &[String]) -> (usize, Option<usize>) {
    let mut found = None;
    for depth in 0..chain.len() {
        match parsed.tree.find_class(&chain[depth], &chain[..depth]) {
            Some(idx) => found = Some((depth + 1, idx)),
            None => break,
        }
    }
    match found {
        Some((d, idx)) => (d, Some(idx)),
        None => (0, None),
    }
}

/// Indentation of the first statement in a class body.
fn body_indent(lines: &[String], class: &CodeBlock) -> String {
    let own = class.indent().len();
    lines[class.span.start as usize..class.span.end as usize]
        .iter()
        .map(|l| (l, l.len() - l.trim_start().len()))
        .find(|(l, ws)| *ws > own && !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(l, ws)| l[..ws].to_string())
        .unwrap_or_else(|| format!("{}{INDENT_STEP}", class.indent()))
}

/// Class shells for `classes` (possibly none) wrapping the test block.
fn shell_and_block(test: &TestSource, classes: &[String], indent: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = indent.to_string();
    for class in classes {
        out.push(format!("{current}class {class}:"));
        current.push_str(INDENT_STEP);
    }
    out.extend(test.block.reindented(&current));
    out
}

fn append_at_end(lines: &mut Vec<String>, block: Vec<String>) {
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    if !lines.is_empty() {
        lines.extend([String::new(), String::new()]);
    }
    lines.extend(block);
}

/// Line overlap between the original test and the gist's version of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TestF1 {
    const ZERO: TestF1 = TestF1 {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

/// Compares normalized lines of the original test with the gist's
/// same-named function, preferring one in the same class context.
pub fn test_f1(original: &TestSource, gist: &GistCandidate) -> TestF1 {
    let Some(parsed) = &gist.parsed else {
        return TestF1::ZERO;
    };
    let name = &original.node.function_name;
    let idx = last_function(parsed, name, &original.class_chain()).or_else(|| {
        parsed.tree.blocks.iter().rposition(|b| {
            b.kind == crate::source::BlockKind::Function && b.name.as_deref() == Some(name.as_str())
        })
    });
    let Some(idx) = idx else {
        return TestF1::ZERO;
    };
    let gist_lines = parsed.tree.subtree_lines(idx);
    overlap_f1(&original.lines, &gist_lines)
}

/// Multiset overlap of two line lists.
pub fn overlap_f1(original: &[String], candidate: &[String]) -> TestF1 {
    if original.is_empty() || candidate.is_empty() {
        return TestF1::ZERO;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in original {
        *counts.entry(l).or_default() += 1;
    }
    let mut matched = 0usize;
    for l in candidate {
        if let Some(c) = counts.get_mut(l.as_str()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    let precision = matched as f64 / candidate.len() as f64;
    let recall = matched as f64 / original.len() as f64;
    let f1 = if matched == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    TestF1 { precision, recall, f1 }
}
