//! Configuration, execution and CSV output behind the `fbsde` executable.

pub mod config;
pub mod run;

pub use config::{parse_assignment, ConfigError, Experiment, ExperimentConfig, Overrides, Params};
pub use run::{csv_table, execute, run_to_dir, write_outputs, Outcome, RunError, Table, MANIFEST};
