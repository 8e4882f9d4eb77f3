//! Execution policy for the data-parallel loops (replicates, grid rows,
//! folds, per-SNP screening, per-subject accumulation).
//!
//! With the `parallel` feature disabled every policy runs sequentially.
//! Results are always collected in index order, so output never depends
//! on the schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// Evaluates `f(0..len)` and returns the results in index order.
pub fn map_indexed<T, F>(mode: Parallelism, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode == Parallelism::Rayon {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = mode;
    (0..len).map(f).collect()
}

/// Runs `f` with every nested rayon loop confined to one thread.
pub fn single_threaded<R: Send, F: FnOnce() -> R + Send>(f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            return pool.install(f);
        }
    }
    f()
}

/// Sums per-chunk partial results in a fixed order.
///
/// Chunk boundaries depend only on `len` and `chunk`, never on the thread
/// count, so the reduction is bit-identical across schedules.
pub fn chunked_reduce<T, F, R>(mode: Parallelism, len: usize, chunk: usize, map: F, mut reduce: R) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    R: FnMut(T, T) -> T,
{
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    let parts = map_indexed(mode, n_chunks, |c| map(c * chunk..((c + 1) * chunk).min(len)));
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, &mut reduce))
}
