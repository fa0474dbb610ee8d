//! Front end for sequential interaction testing: CSV ingestion, layered
//! configuration, reports and the `seqint` command.

pub mod cli;
pub mod commands;
pub mod config;
pub mod csv_input;
pub mod error;
pub mod report;

use std::path::PathBuf;

pub use cli::{Cli, Command};
pub use commands::{cmd_simulate, cmd_test, render};
pub use config::{Format, Mode, RunConfig};
pub use error::{CliError, CliResult};
pub use report::ReportDocument;

/// Resolves the configuration, runs the command on a pool of the requested
/// size, writes both report files and returns the paths plus a printable
/// summary.
pub fn run(cli: &Cli) -> CliResult<(PathBuf, PathBuf, String)> {
    let cfg = match &cli.command {
        Command::Test(t) => t.resolve()?,
        Command::Simulate(s) => s.resolve()?,
    };
    if cfg.workers == Some(0) {
        return Err(CliError::Config("workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let doc = pool.install(|| match &cli.command {
        Command::Test(_) => cmd_test(&cfg),
        Command::Simulate(_) => cmd_simulate(&cfg),
    })?;
    let (primary, companion) = doc.write(&cfg.out, cfg.format)?;
    Ok((primary, companion, render(&doc)))
}
