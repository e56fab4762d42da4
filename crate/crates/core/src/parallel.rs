//! Thread-count control for kernel-internal parallelism.
//!
//! Every parallel kernel in this crate computes each output element with a
//! fixed, input-only arithmetic order, so results are bitwise identical for
//! any thread count. The limit below only changes wall-clock time.
//!
//! `FASTHDR_THREADS=1` forces the fully serial path.

use std::sync::atomic::{AtomicUsize, Ordering};

static LIMIT: AtomicUsize = AtomicUsize::new(0);

fn default_limit() -> usize {
    std::env::var("FASTHDR_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Current thread limit for parallel kernels.
pub fn thread_limit() -> usize {
    match LIMIT.load(Ordering::Relaxed) {
        0 => {
            let n = default_limit();
            LIMIT.store(n, Ordering::Relaxed);
            n
        }
        n => n,
    }
}

/// Override the thread limit (1 = serial). Affects speed only, never values.
pub fn set_thread_limit(n: usize) {
    LIMIT.store(n.max(1), Ordering::Relaxed);
}

/// Split `units` work items into at most `thread_limit()` contiguous ranges
/// and run `f(range)` on each, possibly in parallel. `f` must write only to
/// locations owned by its range.
pub fn for_each_range<F>(units: usize, f: F)
where
    F: Fn(std::ops::Range<usize>) + Sync,
{
    if units == 0 {
        return;
    }
    let parts = thread_limit().min(units);
    if parts == 1 {
        f(0..units);
        return;
    }
    let chunk = units.div_ceil(parts);
    let ranges: Vec<_> = (0..parts)
        .map(|i| (i * chunk).min(units)..((i + 1) * chunk).min(units))
        .filter(|r| !r.is_empty())
        .collect();
    rayon::scope(|s| {
        for r in ranges {
            let f = &f;
            s.spawn(move |_| f(r));
        }
    });
}
