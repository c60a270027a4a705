//! Data-parallel dispatch for the hot loops.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool; without
//! it they run sequentially. Work is always split into the same fixed chunks
//! and each chunk is computed by the same code, so results are bit-identical
//! either way. [`set_parallel`] switches to the sequential path at runtime,
//! which the benches use to compare both.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Below this many elements of work the sequential path is always taken.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Enables or disables the parallel path at runtime (no-op without the feature).
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Calls `f(chunk_index, chunk)` for each `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && data.len() >= MIN_PARALLEL_WORK && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Elementwise `out[i] = f(i)` split into fixed-size blocks.
pub fn fill_with<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    const BLOCK: usize = 4096;
    for_each_chunk_mut(out, BLOCK, |b, chunk| {
        let base = b * BLOCK;
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = f(base + j);
        }
    });
}

/// Maps `0..n` to values, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
