mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gistify_core::sandbox::{run_command, run_with_trace};
use gistify_core::task::{build_tasks, discover_tests, pytest_command, Exclusion, RepositoryRef, Template, TaskDescriptor};
use walkdir::WalkDir;

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().display().to_string();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn collects_every_test_item() {
    require_python!();
    let repo = RepositoryRef::scan(&common::repo("calc"), None).unwrap();
    assert_eq!(repo.package_names.iter().collect::<Vec<_>>(), ["calcpkg"]);
    let tests = discover_tests(&repo, &common::runner(false)).unwrap();
    assert_eq!(tests.len(), 14);
    assert!(tests.iter().any(|t| t.node_id == "tests/test_core.py::test_sub[5-3-2]"));
}

#[test]
fn builds_tasks_and_leaves_checkouts_untouched() {
    require_python!();
    let out = tempfile::tempdir().unwrap();
    let mut totals = BTreeMap::new();
    for name in ["calc", "textkit", "shapes"] {
        let root = common::repo(name);
        let before = snapshot(&root);
        let repo = RepositoryRef::scan(&root, None).unwrap();
        let dir = out.path().join(name);
        let (specs, excluded) = build_tasks(&repo, &common::runner(false), Template::Base, "/app", &dir).unwrap();
        assert_eq!(snapshot(&root), before, "{name} checkout was modified");
        totals.insert(name, (specs.len(), excluded));
        for spec in &specs {
            let desc = TaskDescriptor::load(&dir.join(format!("{}.json", spec.task_id()))).unwrap();
            assert_eq!(desc.base_test().function_name, spec.base_test.function_name);
            assert!(desc.prompt.contains(&spec.entrypoint));
            assert!(!desc.prompt.contains("{working dir}"));
        }
    }
    assert_eq!(totals["calc"].0, 9);
    assert_eq!(totals["textkit"].0, 9);
    assert_eq!(totals["shapes"].0, 8);
    let mut calc: Vec<_> = totals["calc"]
        .1
        .iter()
        .map(|e| (e.base_node_id.as_str(), e.reason.clone()))
        .collect();
    calc.sort_by_key(|e| e.0);
    assert_eq!(
        calc,
        [
            ("tests/test_stats.py::test_spread_from_file", Exclusion::LocationDependent),
            ("tests/test_stats.py::test_spread_known_bug", Exclusion::BaselineFailed),
        ]
    );
    assert!(totals["textkit"].1.is_empty() && totals["shapes"].1.is_empty());
}

#[test]
fn parameterized_variants_share_one_task() {
    require_python!();
    let task = TaskDescriptor::load(&common::tasks_dir().join("calc__tests_test_core__test_sub.json")).unwrap();
    assert_eq!(task.base_node_id, "tests/test_core.py::test_sub");
    assert_eq!(task.variants().len(), 3);
    assert_eq!(task.gist_entrypoint(), "python -m pytest concise.py::test_sub");
}

#[test]
fn sandbox_edits_stay_in_the_sandbox() {
    require_python!();
    let root = common::repo("calc");
    let before = snapshot(&root);
    let runner = common::runner(false);
    let sandbox = runner.from_repo(&root).unwrap();
    sandbox.write_file("calcpkg/core.py", "raise SystemExit(3)\n").unwrap();
    let outcome = run_command(&sandbox, &pytest_command("tests/test_core.py::test_sub")).unwrap();
    assert!(!outcome.ran());
    assert_eq!(snapshot(&root), before);
}

#[test]
fn timeouts_kill_the_process_group() {
    require_python!();
    let runner = common::runner(false);
    let mut sandbox = runner.empty().unwrap();
    sandbox.set_timeout(std::time::Duration::from_millis(500));
    let started = std::time::Instant::now();
    let outcome = run_command(&sandbox, "sleep 30 & sleep 30; wait").unwrap();
    assert!(outcome.timed_out);
    assert_eq!(outcome.exit_status, gistify_core::sandbox::TIMEOUT_EXIT);
    assert!(started.elapsed().as_secs() < 10);
}

#[test]
fn live_traces_are_deterministic() {
    require_python!();
    let runner = common::runner(true);
    let command = pytest_command("tests/test_core.py::test_hypot");
    let mut seen = Vec::new();
    for _ in 0..2 {
        let sandbox = runner.from_repo(&common::repo("calc")).unwrap();
        let (outcome, trace) = run_with_trace(&sandbox, &command, sandbox.workdir()).unwrap();
        assert!(outcome.succeeded(), "{}", outcome.stdout);
        let trace = trace.unwrap();
        let core: BTreeMap<u32, ()> = trace.lines_for("calcpkg/core.py").into_iter().map(|l| (l, ())).collect();
        seen.push((core.into_keys().collect::<Vec<_>>(), trace.call_count, trace.unique_files));
    }
    assert_eq!(seen[0], seen[1]);
    // hypot, add and mul bodies ran; the negative branch of mul did not.
    let lines = &seen[0].0;
    for l in [7, 15, 16, 17, 20, 32] {
        assert!(lines.contains(&l), "line {l} missing from {lines:?}");
    }
    assert!(!lines.contains(&19));
}

#[test]
fn tracing_without_hook_is_a_setup_error() {
    let runner = common::runner(false);
    let sandbox = runner.empty().unwrap();
    assert!(run_with_trace(&sandbox, "true", sandbox.workdir()).is_err());
}
