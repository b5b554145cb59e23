//! Order-preserving data parallelism with a sequential fallback.
//!
//! Built with the `parallel` feature (default), [`ExecMode::Parallel`] fans
//! work out over the rayon pool. Without it both modes run in a plain loop.
//! Either way results come back in index order, so callers see identical
//! output regardless of worker count.

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// True when this build can actually run work concurrently.
    pub fn is_concurrent(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`]; the error with the lowest index wins.
pub fn try_map_indexed<T, F>(n: usize, mode: ExecMode, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indexed(n, mode, f).into_iter().collect()
}

/// Sizes the global worker pool. Only the first call has any effect.
pub fn configure_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(LabError::invalid("worker count must be positive"));
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    Ok(())
}

/// Independent stream seed for `(seed, stream)` via the splitmix64 finalizer.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
