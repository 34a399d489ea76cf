//! Execution strategy for data-parallel loops.
//!
//! Numeric results are identical under both strategies: parallel maps are
//! collected in index order and all reductions happen sequentially on the
//! collected results, so enabling the `parallel` feature never changes
//! output bits, only wall-clock time.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Exec::Parallel
    }

    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Exec::Sequential
    }
}

/// Applies `f` to `0..n` and collects results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}
