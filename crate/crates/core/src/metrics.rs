//! Fidelity, execution rate and existence rate.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::par::{self, Mode};
use crate::sandbox::RunOutcome;
use crate::source::{BlockKey, BlockKind, CodeBlockTree, LineClassification, LineSpan, LineTag, ParsedSource};

/// How much of the captured output must agree for fidelity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StderrMode {
    /// Full stdout and stderr after normalization.
    #[default]
    Strict,
    /// Only the short failure summary and the counts.
    SummaryOnly,
}

impl std::str::FromStr for StderrMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(StderrMode::Strict),
            "summary-only" => Ok(StderrMode::SummaryOnly),
            other => Err(format!("unknown fidelity mode `{other}` (expected strict or summary-only)")),
        }
    }
}

/// Where a run happened, so location-specific text can be masked.
#[derive(Clone, Debug)]
pub struct OutputContext {
    pub sandbox_root: PathBuf,
    /// Path of the file holding the test, relative to the sandbox root.
    pub test_file: String,
}

static HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(platform |rootdir:|configfile:|plugins:|cachedir:|cacheprovider|Python \d)").unwrap());
static SRC_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[^\s:()\[\]]*\.py:\d+").unwrap());
static DURATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bin \d+(\.\d+)?s\b(?: \(\d+:\d{2}:\d{2}\))?").unwrap());
static ADDRESS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"0x[0-9a-fA-F]{4,}").unwrap());
static TIMESTAMP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\d{4}-\d{2}-\d{2}[ T]\d{2}:\d{2}:\d{2}(\.\d+)?").unwrap());
static TMP_PATH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"/(?:tmp|var/folders|private/var)/[^\s:'\x22]*").unwrap());
static SEPARATORS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"={3,}|_{3,}|-{3,}").unwrap());
static SPACES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]+").unwrap());

/// Masks everything in runner output that legitimately differs between two
/// runs of the same test from different locations.
pub fn normalize_output(text: &str, ctx: &OutputContext) -> String {
    let mut text = text.to_string();
    for root in roots(&ctx.sandbox_root) {
        text = text.replace(&format!("{root}/"), "").replace(&root, "<ROOT>");
    }
    let mut out = Vec::new();
    for line in text.lines() {
        if HEADER.is_match(line) {
            continue;
        }
        let line = TIMESTAMP.replace_all(line, "<TS>");
        let line = TMP_PATH.replace_all(&line, "<TMP>");
        let line = SRC_LINE.replace_all(&line, "<SRC>:<N>");
        let line = line.replace(&ctx.test_file, "<TEST>");
        let line = DURATION.replace_all(&line, "in <T>s");
        let line = ADDRESS.replace_all(&line, "0x<ADDR>");
        let line = SEPARATORS.replace_all(&line, |c: &regex::Captures| c[0][..3].to_string());
        let line = SPACES.replace_all(line.trim(), " ");
        if !line.is_empty() {
            out.push(line.into_owned());
        }
    }
    out.join("\n")
}

fn roots(root: &Path) -> Vec<String> {
    let mut out = vec![root.display().to_string()];
    if let Ok(c) = root.canonicalize() {
        let c = c.display().to_string();
        if !out.contains(&c) {
            out.push(c);
        }
    }
    // Longest first so a canonical prefix never leaves a tail behind.
    out.sort_by_key(|s| std::cmp::Reverse(s.len()));
    out
}

/// Lines of the short failure summary.
fn short_summary(normalized: &str) -> Vec<&str> {
    normalized
        .lines()
        .skip_while(|l| !l.contains("short test summary info"))
        .skip(1)
        .filter(|l| !l.starts_with("==="))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityCheck {
    pub fidelity: u8,
    pub gist_ran: bool,
    pub counts_match: bool,
    pub output_match: bool,
    /// First differing normalized line pair, for debugging.
    pub first_difference: Option<(String, String)>,
}

/// 1 iff the gist ran, reported the same pass/fail counts and printed the
/// same normalized output as the original.
pub fn execution_fidelity(
    original: &RunOutcome,
    original_ctx: &OutputContext,
    gist: &RunOutcome,
    gist_ctx: &OutputContext,
    mode: StderrMode,
) -> FidelityCheck {
    let gist_ran = gist.ran();
    let counts_match = match (original.counts, gist.counts) {
        (Some(a), Some(b)) => a.outcome_key() == b.outcome_key(),
        _ => false,
    };
    let streams = |o: &RunOutcome, c: &OutputContext| (normalize_output(&o.stdout, c), normalize_output(&o.stderr, c));
    let (out_a, err_a) = streams(original, original_ctx);
    let (out_b, err_b) = streams(gist, gist_ctx);
    let first_difference = match mode {
        StderrMode::Strict => first_diff(&out_a, &out_b).or_else(|| first_diff(&err_a, &err_b)),
        StderrMode::SummaryOnly => {
            let (a, b) = (short_summary(&out_a), short_summary(&out_b));
            first_diff(&a.join("\n"), &b.join("\n"))
        }
    };
    let output_match = first_difference.is_none();
    FidelityCheck {
        fidelity: u8::from(gist_ran && original.ran() && counts_match && output_match),
        gist_ran,
        counts_match,
        output_match,
        first_difference,
    }
}

fn first_diff(a: &str, b: &str) -> Option<(String, String)> {
    if a == b {
        return None;
    }
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    (0..la.len().max(lb.len()))
        .find(|&i| la.get(i) != lb.get(i))
        .map(|i| {
            (
                la.get(i).copied().unwrap_or("<end>").to_string(),
                lb.get(i).copied().unwrap_or("<end>").to_string(),
            )
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRate {
    /// Absent when the file has no executable lines.
    pub rate: Option<f64>,
    pub executed: usize,
    pub executable: usize,
    /// Executable lines that never ran.
    pub unexecuted_lines: Vec<u32>,
}

/// Share of the file's executable lines that the trace shows ran.
pub fn line_execution_rate(classification: &LineClassification, traced: &HashSet<u32>) -> ExecutionRate {
    let mut executed = 0;
    let mut unexecuted_lines = Vec::new();
    for &line in &classification.executable_lines {
        if classification.is_executed(line, traced) {
            executed += 1;
        } else {
            unexecuted_lines.push(line);
        }
    }
    let executable = classification.executable_lines.len();
    ExecutionRate {
        rate: (executable > 0).then(|| executed as f64 / executable as f64),
        executed,
        executable,
        unexecuted_lines,
    }
}

/// Per-line annotations for the sidecar detail file.
pub fn execution_detail(classification: &LineClassification, traced: &HashSet<u32>) -> Vec<(u32, LineTag, bool)> {
    classification
        .tags
        .iter()
        .enumerate()
        .map(|(i, &tag)| {
            let line = i as u32 + 1;
            (line, tag, tag == LineTag::Executable && classification.is_executed(line, traced))
        })
        .collect()
}

/// One named block of the original codebase.
#[derive(Clone, Debug)]
pub struct IndexedBlock {
    pub file: String,
    pub span: LineSpan,
    pub lines: HashSet<String>,
}

/// Every block of a codebase, keyed by name and hierarchy but not by file.
#[derive(Clone, Debug, Default)]
pub struct CodebaseIndex {
    pub blocks_by_key: HashMap<BlockKey, Vec<IndexedBlock>>,
    pub toplevel_lines: HashSet<String>,
    pub files: Vec<String>,
    /// Files skipped because they do not parse.
    pub unparsed: Vec<String>,
}

impl CodebaseIndex {
    pub fn build(root: &Path) -> std::io::Result<Self> {
        Self::build_in(Mode::default(), root)
    }

    pub fn build_in(mode: Mode, root: &Path) -> std::io::Result<Self> {
        let mut files: Vec<PathBuf> = WalkDir::new(root)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| {
                let name = e.file_name().to_string_lossy();
                e.depth() == 0 || !(name.starts_with('.') || name == "__pycache__")
            })
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "py"))
            .map(|e| e.into_path())
            .collect();
        files.sort();
        let texts = files
            .iter()
            .map(|p| fs::read_to_string(p).map(|t| (rel(root, p), t)))
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self::from_sources_in(mode, &texts))
    }

    /// Builds from in-memory `(relative path, text)` pairs.
    pub fn from_sources_in(mode: Mode, sources: &[(String, String)]) -> Self {
        let parsed = par::map_in(mode, sources, |(path, text)| {
            (path.clone(), ParsedSource::parse(text, Path::new(path)).map(|p| p.tree))
        });
        let mut index = CodebaseIndex::default();
        for (path, tree) in parsed {
            match tree {
                Ok(tree) => index.add(&path, &tree),
                Err(e) => {
                    log::warn!("index: skipping {path}: {e}");
                    index.unparsed.push(path);
                }
            }
        }
        index
    }

    fn add(&mut self, path: &str, tree: &CodeBlockTree) {
        self.files.push(path.to_string());
        for block in &tree.blocks {
            match block.key() {
                None => self.toplevel_lines.extend(block.normalized_lines.iter().cloned()),
                Some(key) => self.blocks_by_key.entry(key).or_default().push(IndexedBlock {
                    file: path.to_string(),
                    span: block.span,
                    lines: block.normalized_lines.iter().cloned().collect(),
                }),
            }
        }
    }

    pub fn candidates(&self, key: &BlockKey) -> &[IndexedBlock] {
        self.blocks_by_key.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn block_count(&self) -> usize {
        self.blocks_by_key.values().map(Vec::len).sum()
    }
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMatch {
    pub kind: BlockKind,
    pub name: Option<String>,
    pub parent_chain: Vec<String>,
    pub span: LineSpan,
    /// Original file of the chosen candidate block.
    pub matched_file: Option<String>,
    pub lines: Vec<LineMatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineMatch {
    pub text: String,
    pub exists: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExistenceRate {
    /// Absent when the gist has no block lines.
    pub rate: Option<f64>,
    pub matched: usize,
    pub total: usize,
    pub blocks: Vec<BlockMatch>,
}

/// Share of the gist's normalized lines that also appear in the original
/// block with the same name and position.
pub fn line_existence_rate(gist: &CodeBlockTree, index: &CodebaseIndex) -> ExistenceRate {
    let mut matched = 0;
    let mut total = 0;
    let mut blocks = Vec::with_capacity(gist.blocks.len());
    for block in &gist.blocks {
        let (matched_file, lines) = match block.key() {
            None => (
                None,
                block
                    .normalized_lines
                    .iter()
                    .map(|l| LineMatch {
                        exists: index.toplevel_lines.contains(l),
                        text: l.clone(),
                    })
                    .collect::<Vec<_>>(),
            ),
            Some(key) => {
                let best = best_candidate(&block.normalized_lines, index.candidates(&key));
                let lines = block
                    .normalized_lines
                    .iter()
                    .map(|l| LineMatch {
                        exists: best.is_some_and(|b| b.lines.contains(l)),
                        text: l.clone(),
                    })
                    .collect();
                (best.map(|b| b.file.clone()), lines)
            }
        };
        matched += lines.iter().filter(|l| l.exists).count();
        total += lines.len();
        blocks.push(BlockMatch {
            kind: block.kind,
            name: block.name.clone(),
            parent_chain: block.parent_chain.clone(),
            span: block.span,
            matched_file,
            lines,
        });
    }
    ExistenceRate {
        rate: (total > 0).then(|| matched as f64 / total as f64),
        matched,
        total,
        blocks,
    }
}

/// Candidate covering the most lines; the earliest file wins ties.
fn best_candidate<'a>(lines: &[String], candidates: &'a [IndexedBlock]) -> Option<&'a IndexedBlock> {
    let mut best: Option<(&IndexedBlock, usize)> = None;
    for c in candidates {
        let score = lines.iter().filter(|l| c.lines.contains(*l)).count();
        let better = match best {
            None => true,
            Some((b, s)) => score > s || (score == s && c.file < b.file),
        };
        if better {
            best = Some((c, score));
        }
    }
    best.map(|(b, _)| b)
}
