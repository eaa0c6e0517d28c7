//! Library side of the `nbm` binary: configuration, checkpoints, image
//! output and the subcommands themselves.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod pgm;

pub use error::CliError;

/// Sizes the global thread pool from `NBM_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NBM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("NBM_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))
}
