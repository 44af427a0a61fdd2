//! Deterministic data parallelism: work is split into fixed-size chunks
//! whose results are combined in chunk order, so output does not depend on
//! the number of worker threads.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 32;

/// Runs `f` on consecutive ranges of `0..n` and returns the results in order.
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect()
}
