//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) row loops and per-item maps
//! run on the rayon pool. Without it, or after `set_enabled(false)`, the same
//! closures run on the calling thread. Every helper assigns work by index and
//! never reduces across threads, so results are bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Minimum number of rows handed to one rayon task.
#[cfg(feature = "parallel")]
const MIN_ROWS_PER_TASK: usize = 4;

/// Toggle parallel execution at runtime. Has no effect when the crate is
/// built without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Whether helpers in this module currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Run `f(row_index, row)` over consecutive `row_len` chunks of `data`.
pub fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() / row_len >= 2 * MIN_ROWS_PER_TASK {
        data.par_chunks_mut(row_len)
            .with_min_len(MIN_ROWS_PER_TASK)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        return items
            .par_iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }
    items.iter().enumerate().map(|(i, item)| f(i, item)).collect()
}
