//! Reading execution traces written by the interpreter-side tracer.
//!
//! The tracer writes UTF-8 line-delimited JSON, one event per line:
//!
//! ```text
//! {"k":"call","p":"/abs/path.py","l":12,"q":"module.func"}
//! ```
//!
//! A process that could not activate the tracer writes a single
//! `{"k":"error","msg":"..."}` record instead. Multi-process runs leave one
//! file per process in the trace directory; they are merged here.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Directory the tracer writes its per-process files into.
pub const TRACE_OUT_ENV: &str = "GISTIFY_TRACE_OUT";
/// Only events whose path lies under this root are recorded.
pub const TRACE_SCOPE_ENV: &str = "GISTIFY_TRACE_SCOPE";

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace {path} holds no events{}", .detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    EmptyTrace { path: PathBuf, detail: Option<String> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Call,
    Line,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    #[serde(rename = "k")]
    pub kind: EventKind,
    #[serde(rename = "p")]
    pub path: String,
    #[serde(rename = "l")]
    pub line: u32,
    #[serde(rename = "q")]
    pub qualname: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub events: Vec<TraceEvent>,
    pub executed_lines: BTreeMap<String, BTreeSet<u32>>,
    pub call_count: usize,
    pub unique_files: usize,
    /// Records that could not be decoded (typically a torn final write).
    pub malformed: usize,
    /// Messages from tracer activation failures.
    pub errors: Vec<String>,
}

impl ExecutionTrace {
    /// Aggregates events; `unique_files` only counts paths under `scope`
    /// when one is given.
    pub fn from_events(events: Vec<TraceEvent>, scope: Option<&Path>) -> Self {
        let mut executed_lines: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
        let mut files: BTreeSet<&str> = BTreeSet::new();
        let mut call_count = 0;
        for ev in &events {
            match ev.kind {
                EventKind::Call => call_count += 1,
                EventKind::Line => {
                    executed_lines.entry(ev.path.clone()).or_default().insert(ev.line);
                }
            }
            if scope.is_none_or(|s| Path::new(&ev.path).starts_with(s)) {
                files.insert(&ev.path);
            }
        }
        let unique_files = files.len();
        ExecutionTrace {
            events,
            executed_lines,
            call_count,
            unique_files,
            malformed: 0,
            errors: Vec::new(),
        }
    }

    /// Executed lines of the file whose path ends with `file` (a relative
    /// path or bare file name).
    pub fn lines_for(&self, file: &str) -> HashSet<u32> {
        let suffix = format!("/{}", file.trim_start_matches("./"));
        self.executed_lines
            .iter()
            .filter(|(p, _)| p.ends_with(&suffix) || p.as_str() == file)
            .flat_map(|(_, lines)| lines.iter().copied())
            .collect()
    }

    /// Replaces the `from` prefix of every event path with `to`.
    pub fn rebase(&self, from: &Path, to: &Path) -> Self {
        let events = self
            .events
            .iter()
            .map(|ev| {
                let mut ev = ev.clone();
                if let Ok(rest) = Path::new(&ev.path).strip_prefix(from) {
                    ev.path = to.join(rest).display().to_string();
                }
                ev
            })
            .collect();
        let mut out = ExecutionTrace::from_events(events, None);
        out.malformed = self.malformed;
        out.errors = self.errors.clone();
        out
    }
}

/// Loads a trace file, or every `*.jsonl` file of a trace directory in name
/// order.
pub fn load_trace(path: &Path, scope: Option<&Path>) -> Result<ExecutionTrace, TraceError> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|source| TraceError::Unreadable {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };

    let mut events = Vec::new();
    let mut malformed = 0;
    let mut errors = Vec::new();
    for file in &files {
        let fh = fs::File::open(file).map_err(|source| TraceError::Unreadable {
            path: file.clone(),
            source,
        })?;
        for line in BufReader::new(fh).lines() {
            let line = line.map_err(|source| TraceError::Unreadable {
                path: file.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match decode(&line) {
                Some(Record::Event(ev)) => events.push(ev),
                Some(Record::Error(msg)) => errors.push(msg),
                None => malformed += 1,
            }
        }
    }
    if malformed > 0 {
        log::warn!("{}: skipped {malformed} malformed trace records", path.display());
    }
    if events.is_empty() {
        return Err(TraceError::EmptyTrace {
            path: path.to_path_buf(),
            detail: errors.first().cloned(),
        });
    }
    let mut trace = ExecutionTrace::from_events(events, scope);
    trace.malformed = malformed;
    trace.errors = errors;
    Ok(trace)
}

enum Record {
    Event(TraceEvent),
    Error(String),
}

fn decode(line: &str) -> Option<Record> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    if value.get("k").and_then(|k| k.as_str()) == Some("error") {
        let msg = value.get("msg").and_then(|m| m.as_str()).unwrap_or("tracer error");
        return Some(Record::Error(msg.to_string()));
    }
    let ev: TraceEvent = serde_json::from_value(value).ok()?;
    (ev.line >= 1 && Path::new(&ev.path).is_absolute()).then_some(Record::Event(ev))
}

/// Writes events in the tracer's on-disk format.
pub fn write_trace(events: &[TraceEvent], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
