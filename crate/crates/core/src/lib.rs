//! Evaluation harness for single-file distillations of a test run.

pub mod diagnostics;
pub mod evaluate;
pub mod integrate;
pub mod metrics;
pub mod par;
pub mod report;
pub mod sandbox;
pub mod source;
pub mod task;
pub mod trace;
