//! Source model for analyzed Python files.
//!
//! A file is parsed once into a [`ParsedSource`], which carries the block tree
//! used for existence matching, the per-line executability classification used
//! for the execution rate, and enough layout information to splice code back
//! into the file.

mod analyze;
mod normalize;

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use normalize::normalize_fragment;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SourceError {
    #[error("{path}: invalid syntax at line {line}: {message}")]
    SyntaxInvalid {
        path: String,
        line: u32,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Class,
    Function,
    ToplevelUnit,
}

/// Inclusive, 1-based line range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: u32,
    pub end: u32,
}

impl LineSpan {
    pub fn contains(&self, line: u32) -> bool {
        self.start <= line && line <= self.end
    }

    pub fn lines(&self) -> impl Iterator<Item = u32> {
        self.start..=self.end
    }
}

/// Identity of a named block: its kind, name and the names of its enclosing
/// classes and functions. The file it lives in is deliberately not part of it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub kind: BlockKind,
    pub name: String,
    pub parent_chain: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CodeBlock {
    pub kind: BlockKind,
    pub name: Option<String>,
    pub parent_chain: Vec<String>,
    /// Full extent, decorators included.
    pub span: LineSpan,
    pub raw_lines: Vec<String>,
    /// Normalized lines of the code this block owns directly; nested blocks
    /// carry their own.
    pub normalized_lines: Vec<String>,
    /// Lines of `span` not covered by a nested block.
    pub owned_lines: Vec<u32>,
    /// Index of the enclosing block in the tree, if any.
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    #[serde(skip)]
    verbatim: Vec<bool>,
    #[serde(skip)]
    module_leading: bool,
}

impl CodeBlock {
    pub fn key(&self) -> Option<BlockKey> {
        self.name.as_ref().map(|name| BlockKey {
            kind: self.kind,
            name: name.clone(),
            parent_chain: self.parent_chain.clone(),
        })
    }

    /// Indentation of the block's first line.
    pub fn indent(&self) -> &str {
        let first = self.raw_lines.first().map(String::as_str).unwrap_or("");
        &first[..first.len() - first.trim_start().len()]
    }

    /// Raw lines shifted so the block starts at `indent`. Lines inside
    /// multi-line strings keep their exact text.
    pub fn reindented(&self, indent: &str) -> Vec<String> {
        let own = self.indent().len();
        self.raw_lines
            .iter()
            .zip(&self.verbatim)
            .map(|(line, &verbatim)| {
                let ws = line.len() - line.trim_start().len();
                if verbatim {
                    line.clone()
                } else if line.trim().is_empty() {
                    String::new()
                } else if ws >= own {
                    format!("{indent}{}", &line[own..])
                } else {
                    line.clone()
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CodeBlockTree {
    pub source_path: PathBuf,
    pub line_count: u32,
    /// Blocks in pre-order; parents precede their children.
    pub blocks: Vec<CodeBlock>,
    pub roots: Vec<usize>,
}

impl CodeBlockTree {
    /// Finds a function block by name and exact enclosing chain.
    pub fn find_function(&self, name: &str, parent_chain: &[String]) -> Option<usize> {
        self.blocks.iter().position(|b| {
            b.kind == BlockKind::Function && b.name.as_deref() == Some(name) && b.parent_chain == parent_chain
        })
    }

    pub fn find_class(&self, name: &str, parent_chain: &[String]) -> Option<usize> {
        self.blocks.iter().position(|b| {
            b.kind == BlockKind::Class && b.name.as_deref() == Some(name) && b.parent_chain == parent_chain
        })
    }

    /// Normalized lines of a block and everything nested inside it.
    pub fn subtree_lines(&self, idx: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![idx];
        while let Some(i) = stack.pop() {
            let block = &self.blocks[i];
            out.extend(block.normalized_lines.iter().cloned());
            stack.extend(block.children.iter().rev());
        }
        out
    }

    /// Normalized lines of every top-level unit in the file.
    pub fn toplevel_lines(&self) -> impl Iterator<Item = &str> {
        self.blocks
            .iter()
            .filter(|b| b.kind == BlockKind::ToplevelUnit)
            .flat_map(|b| b.normalized_lines.iter().map(String::as_str))
    }

    /// Count of normalized lines over all blocks.
    pub fn total_lines(&self) -> usize {
        self.blocks.iter().map(|b| b.normalized_lines.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineTag {
    NonExecutable,
    PotentiallyExecutable,
    Executable,
}

#[derive(Clone, Debug, Serialize)]
pub struct LineClassification {
    /// One tag per physical line; index 0 is line 1.
    pub tags: Vec<LineTag>,
    pub executable_lines: BTreeSet<u32>,
    /// For each physical line, the spans of the executable statements that
    /// touch it. A statement counts as run when any of its lines is traced.
    #[serde(skip)]
    statement_spans: Vec<Vec<LineSpan>>,
}

impl LineClassification {
    pub fn tag(&self, line: u32) -> Option<LineTag> {
        self.tags.get(line.checked_sub(1)? as usize).copied()
    }

    /// Whether an executable line ran, given the traced physical lines.
    pub fn is_executed(&self, line: u32, traced: &HashSet<u32>) -> bool {
        if traced.contains(&line) {
            return true;
        }
        let Some(spans) = line.checked_sub(1).and_then(|i| self.statement_spans.get(i as usize)) else {
            return false;
        };
        spans.iter().any(|span| span.lines().any(|l| traced.contains(&l)))
    }
}

/// A parsed file with all derived views.
#[derive(Clone, Debug)]
pub struct ParsedSource {
    pub text: String,
    pub tree: CodeBlockTree,
    pub classification: LineClassification,
    /// Lines that continue a multi-line string literal; their leading
    /// whitespace is part of the literal.
    verbatim: Vec<bool>,
}

impl ParsedSource {
    pub fn parse(source: &str, path: &Path) -> Result<Self, SourceError> {
        analyze::analyze(source, path, true)
    }

    pub fn lines(&self) -> Vec<&str> {
        self.text.lines().collect()
    }

    /// True when the line's leading whitespace belongs to a string literal.
    pub fn is_verbatim(&self, line: u32) -> bool {
        line.checked_sub(1)
            .and_then(|i| self.verbatim.get(i as usize))
            .copied()
            .unwrap_or(false)
    }
}

/// Parses a file into its block hierarchy.
pub fn parse_blocks(source: &str, source_path: &Path) -> Result<CodeBlockTree, SourceError> {
    Ok(ParsedSource::parse(source, source_path)?.tree)
}

/// Tags every physical line as executable, potentially executable or not.
pub fn classify_lines(source: &str) -> Result<LineClassification, SourceError> {
    Ok(analyze::analyze(source, Path::new("<source>"), true)?.classification)
}

/// Recomputes a block's normalized lines from its raw text alone.
///
/// The raw lines are dedented (string continuation lines excepted) and parsed
/// as a standalone snippet; the lines owned by the snippet's outermost block
/// are returned. This agrees with `block.normalized_lines` as computed in the
/// context of the whole file.
pub fn normalize_lines(block: &CodeBlock) -> Vec<String> {
    let indent = block.indent().len();
    let mut snippet = String::new();
    for (line, verbatim) in block.raw_lines.iter().zip(&block.verbatim) {
        let ws = line.len() - line.trim_start().len();
        if !*verbatim && ws >= indent {
            snippet.push_str(&line[indent..]);
        } else if !*verbatim && line.trim().is_empty() {
        } else {
            snippet.push_str(line);
        }
        snippet.push('\n');
    }
    match analyze::analyze(&snippet, Path::new("<block>"), block.module_leading) {
        Ok(parsed) => parsed
            .tree
            .blocks
            .first()
            .map(|b| b.normalized_lines.clone())
            .unwrap_or_default(),
        Err(_) => block
            .raw_lines
            .iter()
            .flat_map(|l| normalize_fragment(l))
            .collect(),
    }
}
