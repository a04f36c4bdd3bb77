//! Data-parallel helpers with a sequential fallback.
//!
//! With the default `parallel` feature, [`maybe_par_map`] fans work out over
//! rayon; without it the same call compiles to a plain sequential map. Both
//! paths return results in input order, so reductions performed afterwards
//! are deterministic regardless of thread scheduling. [`seq_map`] is always
//! sequential and exists so benchmarks can compare the two paths directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map in input order, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

/// Map in input order, in parallel when the `parallel` feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential map, kept for benchmark comparisons.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
