//! Batch front end for `sfdiv`: configuration files, run orchestration and
//! persistence, the golden-file oracle suite and static SVG figures.

pub mod config;
pub mod error;
pub mod oracle_suite;
pub mod plot;
pub mod run;
pub mod svg;

pub use error::{CliError, CliResult};

/// Environment variable naming the default output root for `run`.
pub const OUT_ENV: &str = "SFDIV_OUT";
