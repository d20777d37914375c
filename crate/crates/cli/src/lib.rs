//! Experiment runner behind the `tdrift` binary: configuration, the
//! `split`, `drift`, `run` and `report` commands, and the run directory
//! layout.

pub mod config;
pub mod drift;
pub mod error;
pub mod fsutil;
pub mod report;
pub mod run;
pub mod split;

pub use config::{ExperimentConfig, Overrides, ProtocolSpec};
pub use drift::cmd_drift;
pub use error::CliError;
pub use report::cmd_report;
pub use run::{cmd_run, RunOutcome};
pub use split::cmd_split;
