//! Scenario runner for the curling HASEL toolkit: configuration, command
//! dispatch and output files.

pub mod config;
pub mod error;
pub mod run;
pub mod trajectory_csv;

pub use config::{Mode, Scenario};
pub use error::CliError;
pub use run::{execute, Command};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "HASEL_PH_OUT";
