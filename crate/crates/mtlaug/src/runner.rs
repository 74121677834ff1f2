use mtlaug_core::eval::Runner;
use rayon::prelude::*;

/// Runs tasks on a dedicated rayon pool; results keep index order, and
/// each task owns its RNG streams, so output does not depend on `jobs`.
pub struct PoolRunner {
    pool: rayon::ThreadPool,
}

impl PoolRunner {
    pub fn new(jobs: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .expect("thread pool");
        Self { pool }
    }
}

impl Runner for PoolRunner {
    fn run<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}
