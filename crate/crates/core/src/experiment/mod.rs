//! Configuration ingestion, experiment orchestration and reporting.

mod config;
mod output;
mod run;

pub use config::{ConfigError, DecouplingSpec, EngineConfig, EngineMode, ExperimentConfig, SweepConfig, TestSpec};
pub use output::{csv_bytes, num, write_outputs, Row, Timing, CSV_COLUMNS};
pub use run::{run, sweep, Outcome, V_N_DRAWS};
