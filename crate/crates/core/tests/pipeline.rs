mod common;

use std::path::Path;

use gistify_core::diagnostics::ErrorCategory;
use gistify_core::evaluate::{
    evaluate_batch, gist_path, gist_set_name, load_tasks, read_results, EvalOptions, EvaluationReport, Evaluator,
    ResultsWriter, TaskStatus, TraceSource,
};
use gistify_core::integrate::Integration;
use gistify_core::task::TaskDescriptor;

fn task(id: &str) -> TaskDescriptor {
    TaskDescriptor::load(&common::tasks_dir().join(format!("{id}.json"))).unwrap()
}

fn replay(set: &str) -> EvalOptions {
    EvalOptions {
        traces: TraceSource::Recorded(common::traces(set)),
        jobs: 2,
        ..EvalOptions::default()
    }
}

#[test]
fn loads_all_descriptors_in_order() {
    let tasks = load_tasks(&common::tasks_dir()).unwrap();
    assert_eq!(tasks.len(), 12);
    let ids: Vec<String> = tasks.iter().map(TaskDescriptor::task_id).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert!(tasks.iter().all(|t| t.repo_root.is_absolute()));
}

#[test]
fn gist_set_is_named_after_its_directory() {
    assert_eq!(gist_set_name(&common::gists("golden")), "golden");
    assert_eq!(
        gist_path(Path::new("/g"), "calc__x"),
        Path::new("/g/calc__x.py").to_path_buf()
    );
}

#[test]
fn golden_gist_scores_perfectly() {
    require_python!();
    let runner = common::runner(false);
    let evaluator = Evaluator::new(&runner, replay("golden"));
    let t = task("calc__tests_test_core__test_hypot");
    let r = evaluator.evaluate_task(&t, &gist_path(&common::gists("golden"), &t.task_id()), "golden");
    assert_eq!(r.status, TaskStatus::Evaluated, "{:?}", r.error);
    assert_eq!(r.fidelity, Some(1));
    assert_eq!(r.existence_rate, Some(1.0));
    assert_eq!(r.execution_rate, Some(1.0));
    assert_eq!(r.test_f1, Some(1.0));
    assert_eq!(r.pytest_pass_rate, Some(1.0));
    assert_eq!(r.error_category, Some(ErrorCategory::None));
    assert_eq!(r.integration, Some(Integration::Replaced));
    assert_eq!(r.run_metadata.trace_source, "recorded");
    let d = r.difficulty.unwrap();
    assert!(d.call_count > 0 && d.unique_files >= 2);
}

#[test]
fn missing_gist_is_a_file_creation_failure() {
    require_python!();
    let runner = common::runner(false);
    let evaluator = Evaluator::new(&runner, EvalOptions::default());
    let t = task("shapes__tests_test_units__test_convert_unknown");
    let r = evaluator.evaluate_task(&t, Path::new("/nonexistent/gist.py"), "empty");
    assert_eq!(r.status, TaskStatus::Evaluated);
    assert_eq!(r.fidelity, Some(0));
    assert_eq!(r.error_category, Some(ErrorCategory::FileCreationFailure));
    assert_eq!(r.existence_rate, None);
    assert_eq!(r.execution_rate, None);
    assert_eq!(r.test_f1, None);
}

#[test]
fn repository_imports_are_import_errors() {
    require_python!();
    let runner = common::runner(false);
    let evaluator = Evaluator::new(&runner, EvalOptions::default());
    let t = task("textkit__tests_test_slug__test_word_count");
    let r = evaluator.evaluate_task(&t, &gist_path(&common::gists("package-import"), &t.task_id()), "package-import");
    assert_eq!(r.fidelity, Some(0));
    assert_eq!(r.error_category, Some(ErrorCategory::ImportError));
    assert_eq!(r.repo_imports, ["textkit"]);
    assert!(r.name_collisions.is_empty());
    assert_eq!(r.execution_rate, None);
}

#[test]
fn batch_resumes_from_existing_results() {
    require_python!();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.jsonl");
    let tasks: Vec<TaskDescriptor> = load_tasks(&common::tasks_dir())
        .unwrap()
        .into_iter()
        .filter(|t| t.repo_name() == "shapes")
        .take(2)
        .collect();
    let runner = common::runner(false);
    let evaluator = Evaluator::new(&runner, EvalOptions { jobs: 2, ..EvalOptions::default() });
    let gists = common::gists("golden");

    let (first, reports) = evaluate_batch(&evaluator, &tasks[..1], &gists, &out).unwrap();
    assert_eq!((first.evaluated, first.skipped), (1, 0));
    assert_eq!(reports.len(), 1);

    let (second, reports) = evaluate_batch(&evaluator, &tasks, &gists, &out).unwrap();
    assert_eq!((second.evaluated, second.skipped), (1, 1));
    assert_eq!(reports[0].task_id, tasks[1].task_id());

    let stored = read_results(&out).unwrap();
    assert_eq!(stored.len(), 2);
    assert!(stored.iter().all(|r| r.fidelity == Some(1) && r.schema == 1));
}

#[test]
fn concurrent_appends_keep_lines_whole() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/results.jsonl");
    let writer = ResultsWriter::open(&out).unwrap();
    let template: EvaluationReport = serde_json::from_str(SAMPLE).unwrap();
    std::thread::scope(|s| {
        for i in 0..8 {
            let writer = &writer;
            let mut r = template.clone();
            s.spawn(move || {
                for j in 0..25 {
                    r.task_id = format!("t{i}-{j}");
                    writer.append(&r).unwrap();
                }
            });
        }
    });
    let stored = read_results(&out).unwrap();
    assert_eq!(stored.len(), 200);
}

#[test]
fn rejects_unknown_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    std::fs::write(&out, SAMPLE.replace("\"schema\":1", "\"schema\":9")).unwrap();
    let err = read_results(&out).unwrap_err().to_string();
    assert!(err.contains("unsupported schema 9"), "{err}");
}

const SAMPLE: &str = r#"{"schema":1,"task_id":"t","repo":"calc","gist_set":"g","base_node_id":"tests/t.py::test_a","status":"evaluated","fidelity":1,"existence_rate":1.0,"execution_rate":null,"test_f1":1.0,"error_category":"none","difficulty":null,"pytest_pass_rate":1.0,"variants":1,"gist_passed":1,"integration":"replaced","repo_imports":[],"name_collisions":[],"first_output_difference":null,"run_metadata":{"sandbox_mode":"scratch-copy","trace_source":"disabled","fidelity_mode":"strict","baseline_secs":0.5,"gist_secs":0.5,"test_lines_in_execution":true,"notes":[]},"error":null}"#;
