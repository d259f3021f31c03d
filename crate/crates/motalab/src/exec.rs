//! Execution helpers: ordered index maps, parallel when the `parallel`
//! feature is enabled, sequential otherwise.
//!
//! Every parallel site in the crate goes through `run_indexed`, which
//! collects results in index order; reductions over those results are then
//! performed sequentially in a fixed order. Work items are self-contained, so
//! the parallel and sequential builds produce bit-identical numbers, and
//! results do not depend on thread count or scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many items the dispatching map stays sequential; spawning
/// tasks costs more than the work saved on tiny inputs.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 32;

/// Ordered map over `0..n`, always sequential.
pub fn run_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Ordered map over `0..n` on the rayon pool.
#[cfg(feature = "parallel")]
pub fn run_indexed_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Ordered map over `0..n`; parallel for large `n` when the `parallel`
/// feature is on, sequential otherwise. Output order is always `0..n`.
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= PAR_THRESHOLD {
            return run_indexed_par(n, f);
        }
    }
    run_indexed_seq(n, f)
}
