//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is distributed via rayon;
//! without it the same chunked schedules run on one thread. Reductions
//! always fold partial results in index order, so parallel and sequential
//! builds produce bitwise-identical floating-point output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of column chunks used by chunked accumulation schedules.
/// Fixed (not thread-count dependent) so results do not depend on the
/// machine's parallelism.
pub const ACCUM_CHUNKS: usize = 32;

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    (0..n).map(f).collect()
}

/// Splits `out` into disjoint `chunk`-sized pieces and calls
/// `f(chunk_index, piece)` for each, in parallel when enabled.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Chunked map-reduce over `0..n`: `f` produces one partial accumulator per
/// chunk of indices, and partials are folded sequentially in chunk order.
/// The chunk boundaries depend only on `n`, so the floating-point result is
/// identical with and without the `parallel` feature.
pub fn chunked_reduce<U, F, R>(n: usize, f: F, mut reduce: R) -> Option<U>
where
    U: Send,
    F: Fn(std::ops::Range<usize>) -> U + Sync,
    R: FnMut(U, U) -> U,
{
    if n == 0 {
        return None;
    }
    let chunk = n.div_ceil(ACCUM_CHUNKS);
    let ranges: Vec<_> = (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect();
    let partials = map_indexed(ranges.len(), |i| f(ranges[i].clone()));
    partials.into_iter().reduce(|a, b| reduce(a, b))
}
