//! Ordered parallel map over a bounded worker pool.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Worker count; `0` means one worker per available core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Workers(pub usize);

impl Workers {
    pub fn resolved(self) -> usize {
        if self.0 == 0 {
            std::thread::available_parallelism().map_or(1, usize::from)
        } else {
            self.0
        }
    }
}

/// Applies `f` to every item on a dedicated pool of `workers` threads and
/// returns the results in input order.
pub fn ordered_map<T, U, F>(items: &[T], workers: Workers, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    let n = workers.resolved();
    if n == 1 || items.len() < 2 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}
