//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it the same closures run in a plain loop. Output
//! order is always the index order, so results never depend on scheduling.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Route every helper through the sequential path (for benchmarks and
/// debugging). Results are identical either way.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

fn sequential() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Size the global worker pool. Must be called before any parallel work;
/// without the `parallel` feature only `threads == 1` is accepted.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::validation("thread count must be positive"));
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::validation(format!("cannot configure thread pool: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        if threads > 1 {
            return Err(Error::validation("built without the `parallel` feature; only 1 thread is available"));
        }
        Ok(())
    }
}

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if sequential() {
            return map_range_seq(n, f);
        }
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_range_seq(n, f)
    }
}

pub fn map_range_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Apply `f` to each chunk of `out` (chunk index, chunk), in parallel when enabled.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if sequential() {
            out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !sequential()
}

/// Worker threads the parallel kernels will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    if !sequential() {
        return rayon::current_num_threads();
    }
    1
}
