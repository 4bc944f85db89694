//! Fan-out over independent records.
//!
//! With the `parallel` feature (default) work is spread over the current
//! rayon pool; without it every call runs sequentially. Results are always
//! returned in index order, so output never depends on the thread count.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// Whether `Parallel` actually fans out in this build.
    pub fn available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// `(0..n).map(f)` collected in order.
pub fn map_indices<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_indices`] for fallible work. The error of the lowest failing
/// index is returned, tagged with that index.
pub fn try_map_indices<R, F>(n: usize, mode: Parallelism, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map_indices(n, mode, |i| f(i).map_err(|e| e.in_record(i)))
        .into_iter()
        .collect()
}

/// Runs `f` inside a pool of `threads` workers (0 = rayon default).
#[cfg(feature = "parallel")]
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<T: Send>(_threads: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}
