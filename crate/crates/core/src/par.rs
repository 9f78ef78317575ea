//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the closures run on the current rayon pool,
//! otherwise they run in order on the calling thread. Chunk boundaries never
//! depend on the worker count, so reductions built on [`map_chunks`] are
//! bit-identical for any pool size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Cells per work item in the grid loops.
pub const CELL_CHUNK: usize = 64;

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] but each worker gets a scratch value from
/// `init` that is reused across the chunks it processes.
pub fn for_each_chunk_mut_init<T, S, I, F>(data: &mut [T], chunk_len: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> S + Send + Sync,
    F: Fn(&mut S, usize, &mut [T]) + Send + Sync,
{
    if data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each_init(&init, |s, (i, c)| f(s, i, c));
    #[cfg(not(feature = "parallel"))]
    {
        let mut s = init();
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(&mut s, i, c));
    }
}

/// Maps `0..n` split into `chunk_len` ranges and returns results in range order.
pub fn map_chunks<R, F>(n: usize, chunk_len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Send + Sync,
{
    let chunks = n.div_ceil(chunk_len);
    let range = move |i: usize| i * chunk_len..((i + 1) * chunk_len).min(n);
    #[cfg(feature = "parallel")]
    {
        (0..chunks).into_par_iter().map(|i| f(range(i))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..chunks).map(|i| f(range(i))).collect()
    }
}

/// Ordered parallel map over a slice.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f` with at most `workers` threads. Without the `parallel` feature
/// this simply calls `f`.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("failed to build thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

pub fn current_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
