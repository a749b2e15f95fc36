use rayon::prelude::*;

/// Node counts at or above this use the rayon pool; smaller steps stay serial.
const PARALLEL_THRESHOLD: usize = 4096;

/// Maps `f` over `0..n` preserving index order in the output.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n >= PARALLEL_THRESHOLD {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}
