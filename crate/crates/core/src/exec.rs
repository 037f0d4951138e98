//! Execution strategy for the per-document and per-model fan-out.
//!
//! With the `parallel` feature (on by default) work is spread over the rayon
//! global pool; without it, or with [`Execution::Sequential`], every map runs
//! in order on the calling thread. Results are always returned in input order,
//! so the two strategies are interchangeable bit for bit.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Like [`Execution::map`] but stops at the first error (in input order).
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

/// Size the global worker pool. `None` or `Some(0)` keeps the default (one
/// worker per processor). Only the first call has any effect.
pub fn init_workers(jobs: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = jobs.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("worker pool already initialised: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
}
