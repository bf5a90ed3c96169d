//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) loops dispatch to rayon; without it
//! they compile to plain sequential iteration. `set_sequential(true)` forces
//! the sequential path at runtime even when the feature is on, which is what
//! the benchmark suite uses to compare both.
//!
//! Every helper hands each worker a disjoint output region and a fixed index,
//! so the summation order inside each output element never depends on the
//! schedule.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn set_sequential(v: bool) {
    FORCE_SEQUENTIAL.store(v, Ordering::Relaxed);
}

pub fn is_sequential() -> bool {
    #[cfg(feature = "parallel")]
    {
        FORCE_SEQUENTIAL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        true
    }
}

/// Run `f(chunk_index, chunk)` over equally sized disjoint chunks of `buf`.
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in buf.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Order-preserving map over a slice.
pub fn map_slice<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        return items.par_iter().map(|x| f(x)).collect();
    }
    items.iter().map(f).collect()
}
