//! Run configuration, artifact layout and subcommand implementations for the
//! `granugrad` binary.

pub mod commands;
pub mod config;
pub mod output;

use granugrad::{Error, Result};

/// Environment variable capping the worker threads of the simulation kernels.
pub const THREADS_ENV: &str = "GRANUGRAD_THREADS";

/// Sizes the global kernel pool from [`THREADS_ENV`]; unset means one thread
/// per core. Returns the pool size.
pub fn init_threads() -> Result<usize> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize =
            v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
                Error::Config(format!("{THREADS_ENV}={v} is not a positive integer"))
            })?;
        builder = builder.num_threads(n);
    }
    // A pool may already exist when embedded in a test harness; keep it.
    let _ = builder.build_global();
    Ok(rayon::current_num_threads())
}
