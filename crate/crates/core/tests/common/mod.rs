#![allow(dead_code)]

pub mod gen;
pub mod layout;

use std::path::{Path, PathBuf};
use std::time::Duration;

use gistify_core::evaluate::load_tasks;
use gistify_core::sandbox::{Runner, RunnerConfig};
use gistify_core::task::TaskDescriptor;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn repo(name: &str) -> PathBuf {
    fixtures().join("repos").join(name)
}

pub fn tasks_dir() -> PathBuf {
    fixtures().join("tasks")
}

pub fn gists(set: &str) -> PathBuf {
    fixtures().join("gists").join(set)
}

pub fn traces(set: &str) -> PathBuf {
    fixtures().join("traces").join(set)
}

pub fn shim() -> PathBuf {
    fixtures().join("shim")
}

pub const GIST_SETS: [&str; 6] = [
    "golden",
    "fabricated",
    "dead-code",
    "package-import",
    "deleted-test",
    "perturbed-constant",
];

/// Every fixture gist with its set name and task.
pub fn fixture_gists() -> Vec<(&'static str, TaskDescriptor, PathBuf)> {
    let tasks = load_tasks(&tasks_dir()).unwrap();
    let mut out = Vec::new();
    for set in GIST_SETS {
        for task in &tasks {
            let path = gists(set).join(format!("{}.py", task.task_id()));
            if path.exists() {
                out.push((set, task.clone(), path));
            }
        }
    }
    out
}

pub fn runner(with_shim: bool) -> Runner {
    Runner::new(RunnerConfig {
        timeout: Duration::from_secs(60),
        shim_dir: with_shim.then(shim),
        ..RunnerConfig::default()
    })
}

pub fn python_available() -> bool {
    std::process::Command::new("python3")
        .args(["-c", "import pytest"])
        .output()
        .is_ok_and(|o| o.status.success())
}

/// Skips the calling test when python3 with pytest is missing.
#[macro_export]
macro_rules! require_python {
    () => {
        if !$crate::common::python_available() {
            eprintln!("skipping: python3 with pytest not available");
            return;
        }
    };
}
