//! Aggregate summaries over results files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::diagnostics::ErrorCategory;
use crate::evaluate::{EvaluationReport, TaskStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    Repo,
    GistSet,
    RepoAndGistSet,
    None,
}

impl std::str::FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "repo" => Ok(GroupBy::Repo),
            "gist-set" => Ok(GroupBy::GistSet),
            "repo,gist-set" | "repo+gist-set" => Ok(GroupBy::RepoAndGistSet),
            "none" | "all" => Ok(GroupBy::None),
            other => Err(format!("unknown grouping `{other}` (expected repo, gist-set, repo,gist-set or none)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            other => Err(format!("unknown format `{other}` (expected csv or md)")),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("no evaluation records to aggregate")]
pub struct EmptyInput;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    /// Records with status `evaluated`.
    pub tasks: usize,
    pub excluded: usize,
    pub fidelity: Option<f64>,
    pub existence_rate: Option<f64>,
    pub execution_rate: Option<f64>,
    pub test_f1: Option<f64>,
    /// Mean pass rate over tasks with at least one passing variant.
    pub pytest_pass_rate: Option<f64>,
    pub failures: usize,
    /// Count and percentage of failures per category.
    pub categories: BTreeMap<ErrorCategory, (usize, f64)>,
    pub test_f1_vs_fidelity: Correlation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateSummary {
    pub groups: Vec<GroupSummary>,
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Pearson correlation with a two-sided p-value from the t distribution.
pub fn pearson(pairs: &[(f64, f64)]) -> Correlation {
    let n = pairs.len();
    let none = Correlation { r: None, p_value: None, n };
    let constant = |f: fn(&(f64, f64)) -> f64| pairs.iter().all(|p| f(p) == f(&pairs[0]));
    if n < 2 || constant(|p| p.0) || constant(|p| p.1) {
        return none;
    }
    let mx = mean(pairs.iter().map(|p| p.0)).expect("non-empty");
    let my = mean(pairs.iter().map(|p| p.1)).expect("non-empty");
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p_value = (n >= 3).then(|| {
        if (1.0 - r.abs()) < 1e-12 {
            return 0.0;
        }
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        2.0 * (1.0 - dist.cdf(t.abs()))
    });
    Correlation { r: Some(r), p_value, n }
}

fn group_key(r: &EvaluationReport, by: GroupBy) -> String {
    match by {
        GroupBy::Repo => r.repo.clone(),
        GroupBy::GistSet => r.gist_set.clone(),
        GroupBy::RepoAndGistSet => format!("{}/{}", r.repo, r.gist_set),
        GroupBy::None => "all".into(),
    }
}

pub fn aggregate(reports: &[EvaluationReport], by: GroupBy) -> Result<AggregateSummary, EmptyInput> {
    if reports.is_empty() {
        return Err(EmptyInput);
    }
    let mut groups: BTreeMap<String, Vec<&EvaluationReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(group_key(r, by)).or_default().push(r);
    }
    let groups = groups
        .into_iter()
        .map(|(group, members)| summarize(group, &members))
        .collect();
    Ok(AggregateSummary { groups })
}

fn summarize(group: String, members: &[&EvaluationReport]) -> GroupSummary {
    let mut ordered: Vec<&EvaluationReport> = members.to_vec();
    ordered.sort_by(|a, b| (&a.task_id, &a.gist_set).cmp(&(&b.task_id, &b.gist_set)));
    let evaluated: Vec<&EvaluationReport> = ordered
        .iter()
        .copied()
        .filter(|r| r.status == TaskStatus::Evaluated)
        .collect();
    let failures: Vec<&EvaluationReport> = evaluated.iter().copied().filter(|r| r.fidelity == Some(0)).collect();
    let mut categories = BTreeMap::new();
    for cat in ErrorCategory::FAILURES {
        let count = failures.iter().filter(|r| r.error_category == Some(cat)).count();
        let pct = if failures.is_empty() {
            0.0
        } else {
            100.0 * count as f64 / failures.len() as f64
        };
        categories.insert(cat, (count, pct));
    }
    let pairs: Vec<(f64, f64)> = evaluated
        .iter()
        .filter_map(|r| Some((r.test_f1?, f64::from(r.fidelity?))))
        .collect();
    GroupSummary {
        group,
        tasks: evaluated.len(),
        excluded: ordered.len() - evaluated.len(),
        fidelity: mean(evaluated.iter().filter_map(|r| r.fidelity.map(f64::from))),
        existence_rate: mean(evaluated.iter().filter_map(|r| r.existence_rate)),
        execution_rate: mean(evaluated.iter().filter_map(|r| r.execution_rate)),
        test_f1: mean(evaluated.iter().filter_map(|r| r.test_f1)),
        pytest_pass_rate: mean(
            evaluated
                .iter()
                .filter(|r| r.gist_passed.unwrap_or(0) >= 1)
                .filter_map(|r| r.pytest_pass_rate),
        ),
        failures: failures.len(),
        categories,
        test_f1_vs_fidelity: pearson(&pairs),
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

const COLUMNS: [&str; 9] = [
    "group",
    "tasks",
    "excluded",
    "fidelity",
    "existence_rate",
    "execution_rate",
    "test_f1",
    "pytest_pass_rate",
    "failures",
];

fn row(g: &GroupSummary) -> Vec<String> {
    let mut cells = vec![
        g.group.clone(),
        g.tasks.to_string(),
        g.excluded.to_string(),
        num(g.fidelity),
        num(g.existence_rate),
        num(g.execution_rate),
        num(g.test_f1),
        num(g.pytest_pass_rate),
        g.failures.to_string(),
    ];
    for (count, pct) in g.categories.values() {
        cells.push(format!("{pct:.1}% ({count})"));
    }
    cells.push(num(g.test_f1_vs_fidelity.r));
    cells.push(num(g.test_f1_vs_fidelity.p_value));
    cells
}

fn header() -> Vec<String> {
    let mut h: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend(ErrorCategory::FAILURES.iter().copied().collect::<std::collections::BTreeSet<_>>().iter().map(|c| c.to_string()));
    h.push("r_test_f1_fidelity".into());
    h.push("p_value".into());
    h
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render(summary: &AggregateSummary, format: Format) -> String {
    let mut out = String::new();
    let header = header();
    match format {
        Format::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for g in &summary.groups {
                let cells: Vec<String> = row(g).iter().map(|c| csv_cell(c)).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        Format::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for g in &summary.groups {
                let cells: Vec<String> = row(g)
                    .into_iter()
                    .map(|c| if c.is_empty() { "n/a".into() } else { c.replace('|', "\\|") })
                    .collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
        }
    }
    out
}
