//! Execution policy for the data-parallel loops: per-example gradients in a
//! training batch, leave-one-out and k-grid oracle sweeps, evaluation and
//! mining.
//!
//! Both policies return results in input order, so reductions over the output
//! are identical whichever policy ran them. With the `parallel` feature off,
//! [`Exec::Parallel`] degrades to the sequential loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => (0..n).map(f).collect(),
        }
    }

    /// Runs `f` on a pool of at most `workers` threads. Sequential policy (or a
    /// build without `parallel`) just calls `f`.
    pub fn with_workers<R, F>(self, workers: usize, f: F) -> R
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        match self {
            Exec::Sequential => f(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
                Ok(pool) => pool.install(f),
                Err(_) => f(),
            },
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => {
                let _ = workers;
                f()
            }
        }
    }
}
