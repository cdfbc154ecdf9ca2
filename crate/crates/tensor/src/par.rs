//! Data-parallel helpers.
//!
//! With the `parallel` feature, work items are distributed over the rayon
//! pool; without it (or after [`set_enabled(false)`](set_enabled)) the same
//! closures run sequentially in index order. Every helper produces results
//! that do not depend on the execution mode: work items write disjoint
//! outputs and any reduction happens afterwards in a fixed order.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Toggle parallel execution at runtime. Has no effect when the crate is
/// built without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Whether helpers will currently fan out over rayon.
pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Run `f(index, chunk)` over `data.chunks_mut(chunk_len)`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_enabled() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Evaluate `f` for each index in `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f` with parallelism temporarily set to `on`, restoring the previous
/// setting afterwards.
pub fn with_mode<R>(on: bool, f: impl FnOnce() -> R) -> R {
    let prev = ENABLED.swap(on, Ordering::Relaxed);
    let out = f();
    ENABLED.store(prev, Ordering::Relaxed);
    out
}
