//! Thread-pool executor for per-pair work.

use ames_core::exec::Executor;
use rayon::prelude::*;

/// Runs work on a dedicated rayon pool.
pub struct Rayon {
    pool: rayon::ThreadPool,
}

impl Rayon {
    /// `workers = 0` uses every available core.
    pub fn new(workers: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        Ok(Self { pool: rayon::ThreadPoolBuilder::new().num_threads(workers).build()? })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Rayon {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
