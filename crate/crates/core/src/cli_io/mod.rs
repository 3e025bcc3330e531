//! Configuration documents, command dispatch and report output.

pub mod config;
pub mod report;
pub mod run;

pub use config::{load_config, Command, RunConfig};
pub use report::{write_report, Report, Table};
pub use run::{exit_code, main_with, run};
