//! Runtime switch between data-parallel and sequential execution.
//!
//! Every parallel loop in this crate splits work over disjoint output
//! slices, so the parallel and sequential paths produce bit-identical
//! results; the switch only affects wall-clock time. With the `parallel`
//! feature disabled the crate compiles without rayon and always runs
//! sequentially.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon-backed execution path at runtime. A no-op
/// when the crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Whether work will actually run in parallel.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f` to each `chunk`-sized slice of `buf`, passing the chunk index.
/// The final chunk may be shorter when `buf.len()` is not a multiple.
pub(crate) fn chunks_mut<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in buf.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collect `f(0), f(1), ..., f(n-1)` preserving index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
