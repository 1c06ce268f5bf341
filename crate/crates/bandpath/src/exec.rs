//! Work-splitting abstraction for sample-parallel estimators.
//!
//! Estimators partition their sample range into fixed chunks, map each chunk
//! to a partial accumulation, and fold the partials in chunk order. The fold
//! order never depends on the executor, so a fixed seed gives bit-identical
//! results whether chunks run sequentially or on a thread pool.

use alloc::vec::Vec;

/// Samples per chunk. Chunk boundaries are part of the reduction order and
/// therefore of the reproducibility contract.
pub const CHUNK: u64 = 4096;

pub trait Executor: Sync {
    /// Evaluate `f(0), ..., f(n_chunks - 1)` and return the results in index
    /// order. Implementations may run the evaluations in any order or in
    /// parallel.
    fn map_chunks<T, F>(&self, n_chunks: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

/// Runs every chunk on the calling thread.
pub struct Sequential;

impl Executor for Sequential {
    fn map_chunks<T, F>(&self, n_chunks: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..n_chunks).map(f).collect()
    }
}

pub fn chunk_count(n_samples: u64) -> usize {
    (n_samples.div_ceil(CHUNK)) as usize
}

/// Sample index range `[lo, hi)` covered by chunk `c`.
pub fn chunk_bounds(c: usize, n_samples: u64) -> (u64, u64) {
    let lo = c as u64 * CHUNK;
    let hi = (lo + CHUNK).min(n_samples);
    (lo, hi)
}
