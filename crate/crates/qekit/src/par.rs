//! Parallelism seam for the batch loops.
//!
//! Every data-parallel loop in the crate goes through [`map`]: items are
//! mapped independently, results are collected in index order, and any
//! reduction over them happens sequentially afterwards. That keeps results
//! bit-identical whether the `parallel` feature (rayon) is on or off and
//! whatever the worker count is.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
///
/// Runs on the rayon pool when the `parallel` feature is enabled, otherwise
/// sequentially.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential counterpart of [`map`], always single-threaded.
///
/// Exists so benchmarks built with the `parallel` feature can compare both
/// paths in one run.
pub fn map_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}
