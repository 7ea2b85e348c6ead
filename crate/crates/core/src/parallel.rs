//! Data-parallel execution helpers.
//!
//! Hot kernels (rendering, convolution, matmul) map over disjoint output
//! slices and never reduce into shared accumulators, so the parallel and
//! sequential paths produce bit-identical results. The `parallel` feature
//! switches the default; kernels also accept an explicit [`Exec`] so the
//! bench suite can compare both paths in one run.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for a kernel invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Exec {
    /// Crate default: parallel when the feature is enabled.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Work below this many inner operations is not worth a rayon dispatch.
pub(crate) const PAR_THRESHOLD: usize = 16_384;

/// `(0..n).map(f).collect()`, parallel when asked and large enough.
/// Output order is by index either way.
pub(crate) fn map_indexed<T, F>(exec: Exec, n: usize, cost_per_item: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            if n.saturating_mul(cost_per_item) < PAR_THRESHOLD {
                (0..n).map(f).collect()
            } else {
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }
}

/// Apply `f` to equal-length chunks of `out`, in parallel when asked.
/// Each chunk is owned by exactly one task.
pub(crate) fn for_each_chunk<F>(exec: Exec, out: &mut [f64], chunk: usize, cost: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    match exec {
        Exec::Sequential => {
            for (i, c) in out.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            if out.len().saturating_mul(cost) < PAR_THRESHOLD {
                for (i, c) in out.chunks_mut(chunk).enumerate() {
                    f(i, c);
                }
            } else {
                out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            }
        }
    }
}
