//! Optional data parallelism. A thread count of 0 means run inline on the
//! calling thread, which is the deterministic reference mode.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "EMODIFF_THREADS";

/// Reads `EMODIFF_THREADS`; unset means 0.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

/// Evaluates `f(0..n)` and returns results in index order regardless of
/// scheduling.
pub fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads == 0 || n <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}
