//! Crate-wide cap on internal parallelism.
//!
//! The cap defaults to 1 so every run is bit-reproducible out of the box.
//! Raising it parallelizes attention across heads; per-head arithmetic is
//! untouched, so results stay bit-identical for any thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

static MAX_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the maximum number of worker threads (clamped to at least 1).
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Current thread cap.
pub fn max_threads() -> usize {
    MAX_THREADS.load(Ordering::Relaxed)
}

/// Run `f(head, chunk)` for every `head_len`-sized chunk of `out`,
/// spreading heads over at most `max_threads()` scoped threads. Chunks
/// are disjoint, so scheduling cannot change any result.
pub(crate) fn for_each_head<F>(out: &mut [f32], head_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let heads = out.len() / head_len;
    let threads = max_threads().min(heads).max(1);
    if threads <= 1 {
        for (h, chunk) in out.chunks_mut(head_len).enumerate() {
            f(h, chunk);
        }
        return;
    }
    let per = heads.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut slots: Vec<(usize, &mut [f32])> =
            out.chunks_mut(head_len).enumerate().collect();
        while !slots.is_empty() {
            let take = per.min(slots.len());
            let group: Vec<(usize, &mut [f32])> = slots.drain(..take).collect();
            let f = &f;
            scope.spawn(move || {
                for (h, chunk) in group {
                    f(h, chunk);
                }
            });
        }
    });
}
