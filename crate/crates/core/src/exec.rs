//! Dispatch between the rayon data-parallel path and the sequential fallback.
//!
//! Every parallel site in this crate splits work over *independent* output
//! regions (batch samples, channels, whole frames); no floating-point reduction
//! order ever depends on the schedule, so both paths produce bit-identical
//! results. The compiled-in `parallel` feature gates the rayon dependency; the
//! runtime switch lets one binary exercise and benchmark both paths.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Returns whether the data-parallel path is active.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Enables or disables the data-parallel path at runtime, returning the
/// previous setting. A no-op (always sequential) when the `parallel` feature
/// is compiled out.
pub fn set_parallel(enabled: bool) -> bool {
    PARALLEL.swap(enabled, Ordering::Relaxed) && cfg!(feature = "parallel")
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of `data`.
/// Chunks are disjoint, so scheduling cannot affect results.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Collects `f(0), f(1), ..., f(len - 1)` in index order.
pub(crate) fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..len).into_par_iter().map(f).collect();
    }
    (0..len).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_dispatch_covers_all_chunks() {
        let mut data = vec![0u32; 10];
        for_each_chunk(&mut data, 3, |i, chunk| {
            for v in chunk.iter_mut() {
                *v = i as u32 + 1;
            }
        });
        assert_eq!(data, [1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(5, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn runtime_switch_round_trips() {
        let was = set_parallel(false);
        assert!(!parallel_enabled());
        set_parallel(was);
    }
}
