//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) independent work items are spread
//! over the rayon pool; without it, or after [`set_sequential`]`(true)`, the
//! same closures run in a plain loop. Work is always split along independent
//! outputs, never along a reduction axis, so both paths are bit-identical.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential fallback at runtime (used by benches and tests).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Threads available to the data-parallel paths.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Size the global pool. Only the first call has an effect; later calls with
/// a different count are reported as a config error.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::config("thread count must be >= 1"));
    }
    #[cfg(feature = "parallel")]
    {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
            && rayon::current_num_threads() != threads
        {
            return Err(Error::config(format!(
                "thread pool already initialised with {} threads",
                rayon::current_num_threads()
            )));
        }
    }
    if threads == 1 {
        set_sequential(true);
    }
    Ok(())
}

/// `(0..n).map(f).collect()`, in parallel when enabled. Output order is the
/// index order regardless of scheduling.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && data.len() > chunk_len {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}
