//! Runner for the agent pipeline: a flat key/value config, one run per
//! subcommand, a JSON report and plain-text sidecar files.

pub mod config;
pub mod heatmap;
pub mod invariants;
pub mod report;
pub mod run;

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};
pub use report::RunReport;
pub use run::{run, Subcommand};
