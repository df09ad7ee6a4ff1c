//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it every
//! schedule runs on the calling thread. Work items never interact, so results
//! are bitwise identical under either schedule.

use std::sync::atomic::{AtomicU8, Ordering};

/// How independent work items are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Sequential,
    Parallel,
}

impl Schedule {
    /// The effective schedule: `Parallel` degrades to `Sequential` when the
    /// crate is built without the `parallel` feature.
    pub fn effective(self) -> Schedule {
        if cfg!(feature = "parallel") {
            self
        } else {
            Schedule::Sequential
        }
    }
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static DEFAULT: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

/// Element-count threshold below which parallel dispatch is skipped.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

pub fn default_schedule() -> Schedule {
    match DEFAULT.load(Ordering::Relaxed) {
        PAR => Schedule::Parallel,
        _ => Schedule::Sequential,
    }
}

/// Process-wide default; used by benches and the CLI.
pub fn set_default_schedule(s: Schedule) {
    DEFAULT.store(
        match s {
            Schedule::Sequential => SEQ,
            Schedule::Parallel => PAR,
        },
        Ordering::Relaxed,
    );
}

#[cfg_attr(not(feature = "parallel"), allow(dead_code))]
fn use_parallel(s: Schedule, work: usize) -> bool {
    s.effective() == Schedule::Parallel && work >= MIN_PARALLEL_WORK
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(s: Schedule, data: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if use_parallel(s, work) {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = (s, work);
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_indices<R, F>(s: Schedule, n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if use_parallel(s, work) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = (s, work);
    (0..n).map(f).collect()
}
