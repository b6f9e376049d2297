//! Benchmark harness around `qshampoo-core`: experiment configs, the
//! `toy`/`matstudy`/`train`/`memreport` commands and their CSV/JSON reports.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_matstudy, cmd_memreport, cmd_toy, cmd_train, Outcome, TrainRecord, TrainRun};
pub use config::{ExperimentConfig, Format, Mode, SCHEMA_VERSION};
pub use report::{Report, Table, Value};
