mod common;

use gistify_core::evaluate::{gist_path, load_tasks};
use gistify_core::integrate::{integrate_original_test, locate_test_function, test_f1, GistCandidate, Integration};
use gistify_core::task::TestCase;

#[test]
fn golden_gists_absorb_their_tests_idempotently() {
    for task in load_tasks(&common::tasks_dir()).unwrap() {
        let test = locate_test_function(&task.repo_root, &task.base_test()).unwrap();
        let gist = GistCandidate::load(&gist_path(&common::gists("golden"), &task.task_id())).unwrap();
        assert_eq!(test_f1(&test, &gist).f1, 1.0, "{}", task.task_id());

        let once = integrate_original_test(&gist, &test);
        assert_eq!(once.how, Integration::Replaced, "{}", task.task_id());
        assert_eq!(once.gist.content, gist.content, "{}", task.task_id());
        let twice = integrate_original_test(&once.gist, &test);
        assert_eq!(twice.gist.content, once.gist.content);
    }
}

#[test]
fn missing_test_is_appended_and_then_replaced() {
    let task = load_tasks(&common::tasks_dir())
        .unwrap()
        .into_iter()
        .find(|t| t.task_id() == "shapes__tests_test_polygons__TestSquare__test_is_rectangle")
        .unwrap();
    let test = locate_test_function(&task.repo_root, &task.base_test()).unwrap();
    let gist = GistCandidate::new("concise.py", "class Shape:\n    name = 'shape'\n");
    assert_eq!(test_f1(&test, &gist).f1, 0.0);

    let once = integrate_original_test(&gist, &test);
    assert_eq!(once.how, Integration::AppendedWithShell);
    assert!(once.gist.parsed.is_some(), "{}", once.gist.content);
    assert_eq!(test_f1(&test, &once.gist).f1, 1.0);

    let twice = integrate_original_test(&once.gist, &test);
    assert_eq!(twice.how, Integration::Replaced);
    assert_eq!(twice.gist.content, once.gist.content);
}

#[test]
fn unparseable_gist_gets_a_textual_append() {
    let root = common::repo("calc");
    let test = locate_test_function(&root, &TestCase::parse("tests/test_core.py::test_hypot").unwrap()).unwrap();
    let gist = GistCandidate::new("concise.py", "def broken(:\n");
    let out = integrate_original_test(&gist, &test);
    assert_eq!(out.how, Integration::TextualAppend);
    assert!(out.gist.content.ends_with("assert hypot(3, 4) == 5.0\n"), "{}", out.gist.content);
}

#[test]
fn unknown_test_is_reported() {
    let root = common::repo("calc");
    let node = TestCase::parse("tests/test_core.py::test_missing").unwrap();
    assert!(locate_test_function(&root, &node).is_err());
}
