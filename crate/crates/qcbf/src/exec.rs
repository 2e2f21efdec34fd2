use qcbf_core::isaacs::SweepExecutor;
use rayon::prelude::*;

/// Runs solver sweeps on the current rayon pool. Results are collected in
/// index order, so the thread count never changes the output.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonExecutor;

impl SweepExecutor for RayonExecutor {
    fn map_range<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// A pool with `threads` workers (0 means one per core).
pub fn thread_pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool starts")
}
