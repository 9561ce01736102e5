//! Data-parallel helpers with a sequential fallback.
//!
//! Every hot loop in the crate (kernel rows, value-iteration sweeps,
//! Monte Carlo replications, policy enumeration) goes through these helpers.
//! With the `parallel` feature disabled, or with [`Execution::Sequential`],
//! they run on the calling thread. Results never depend on the choice: each
//! index is computed independently and collected in index order.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a data-parallel loop should be executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Single-threaded on the calling thread.
    Sequential,
    /// Rayon work-stealing pool (falls back to sequential without the `parallel` feature).
    #[default]
    Parallel,
}

impl Execution {
    /// True when this build can actually run work in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Overwrites `out[i] = f(i)` for every slot of `out`.
pub fn fill_indexed<T, F>(exec: Execution, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        out.par_iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
        return;
    }
    let _ = exec;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Minimum and maximum of `a[i] - b[i]` over all `i` where `mask(i)` holds.
///
/// Returns `(inf, -inf)` if nothing is selected. Min and max are
/// order-independent, so the parallel and sequential paths agree bit for bit.
pub fn diff_bounds<M>(exec: Execution, a: &[f64], b: &[f64], mask: M) -> (f64, f64)
where
    M: Fn(usize) -> bool + Sync + Send,
{
    let fold = |(lo, hi): (f64, f64), i: usize| {
        if mask(i) {
            let d = a[i] - b[i];
            (lo.min(d), hi.max(d))
        } else {
            (lo, hi)
        }
    };
    let init = (f64::INFINITY, f64::NEG_INFINITY);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..a.len())
            .into_par_iter()
            .fold(|| init, fold)
            .reduce(|| init, |x, y| (x.0.min(y.0), x.1.max(y.1)));
    }
    let _ = exec;
    (0..a.len()).fold(init, fold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_agree() {
        let seq = map_range(Execution::Sequential, 1000, |i| (i * i) % 17);
        let par = map_range(Execution::Parallel, 1000, |i| (i * i) % 17);
        assert_eq!(seq, par);

        let a: Vec<f64> = (0..500).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..500).map(|i| (i as f64).cos()).collect();
        assert_eq!(
            diff_bounds(Execution::Sequential, &a, &b, |i| i % 3 != 0),
            diff_bounds(Execution::Parallel, &a, &b, |i| i % 3 != 0)
        );
    }

    #[test]
    fn empty_mask() {
        let (lo, hi) = diff_bounds(Execution::Parallel, &[1.0], &[0.0], |_| false);
        assert!(lo.is_infinite() && hi.is_infinite());
    }
}
