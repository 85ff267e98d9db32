//! Data-parallel helpers. With the `parallel` feature these dispatch onto the
//! rayon pool; without it they run the same closures sequentially. Every
//! helper writes to disjoint outputs, so results are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar work items a call stays on the current thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Apply `f(row_index, row)` to every `width`-sized row of `data`.
pub fn rows_mut<F>(data: &mut [f64], width: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    let rows = data.len() / width;
    #[cfg(feature = "parallel")]
    if rows > 1 && rows.saturating_mul(work_per_row.max(width)) >= MIN_PARALLEL_WORK {
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = (rows, work_per_row);
    data.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map `f` over a slice, collecting results in order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// True when compiled with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
