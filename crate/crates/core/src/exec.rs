//! Worker pool for per-sub-interval tasks.
//!
//! With the `parallel` feature (default) tasks run on a dedicated rayon pool
//! sized to the requested worker count. Without it, or with one worker, tasks
//! run in index order on the calling thread. Results are always returned in
//! index order, so reductions over them are independent of the worker count.

#[cfg(feature = "parallel")]
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers)
            .field("parallel", &self.is_parallel())
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Pool with `workers` threads. Without the `parallel` feature the count
    /// is recorded but execution stays sequential.
    pub fn with_workers(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        if workers == 1 {
            return Ok(Self::sequential());
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .thread_name(|i| format!("al4dvar-worker-{i}"))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot build worker pool: {e}")))?;
            Ok(Self {
                workers,
                pool: Some(Arc::new(pool)),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            Ok(Self { workers })
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// `[f(0), .., f(count - 1)]`, possibly evaluated concurrently.
    pub fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..count).into_par_iter().map(&f).collect());
        }
        (0..count).map(f).collect()
    }

    /// Like [`Executor::map`] for fallible tasks; the error of the lowest
    /// failing index wins.
    pub fn try_map<T, F>(&self, count: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(count, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_in_index_order() {
        for w in [1, 2, 4] {
            let ex = Executor::with_workers(w).unwrap();
            assert_eq!(ex.map(6, |i| i * i), vec![0, 1, 4, 9, 16, 25]);
            assert_eq!(ex.workers(), w);
        }
        assert!(Executor::with_workers(0).is_err());
    }

    #[test]
    fn lowest_index_error_wins() {
        let ex = Executor::with_workers(3).unwrap();
        let r = ex.try_map(8, |i| {
            if i >= 5 {
                Err(Error::Optimizer(format!("task {i}")))
            } else {
                Ok(i)
            }
        });
        assert_eq!(r, Err(Error::Optimizer("task 5".into())));
    }
}
