//! Index-parallel map with a sequential fallback.
//!
//! - `parallel` feature: rayon's global pool.
//! - otherwise: plain iterators.
//!
//! Results always come back in index order, so any reduction the caller
//! performs over them is independent of scheduling.

/// How an ensemble should be executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Use rayon when compiled with the `parallel` feature, else sequential.
    #[default]
    Parallel,
    Sequential,
}

/// Check if parallel processing is compiled in.
#[inline]
pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// Map `f` over `0..count`, preserving order.
pub fn map_indexed<U, F>(count: usize, exec: Execution, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match exec {
        Execution::Parallel => par_map_indexed(count, f),
        Execution::Sequential => (0..count).map(f).collect(),
    }
}

#[cfg(feature = "parallel")]
fn par_map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}
