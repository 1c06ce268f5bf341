//! Rayon-backed executor. Chunk results are collected in index order, so the
//! reduction sequence (and therefore every estimate) is identical to the
//! sequential executor bit for bit, whatever the pool size.

use bandpath::Executor;
use rayon::prelude::*;

pub struct RayonExec {
    pool: rayon::ThreadPool,
}

impl RayonExec {
    /// Pool with `threads` workers; zero means one per logical core.
    pub fn new(threads: usize) -> anyhow::Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        Ok(RayonExec { pool })
    }
}

impl Executor for RayonExec {
    fn map_chunks<T, F>(&self, n_chunks: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        self.pool.install(|| (0..n_chunks).into_par_iter().map(|c| f(c)).collect())
    }
}
