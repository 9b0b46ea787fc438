//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every kernel parallelizes only over independent output regions and keeps
//! the reduction order per output element fixed, so results are bitwise
//! identical whether the `parallel` feature is on or off and whatever the
//! rayon pool size is. Callers pick a fixed chunk size (never derived from
//! the thread count) to preserve that property.

/// Run `f(chunk_index, chunk)` over fixed-size chunks of `data`.
#[cfg(feature = "parallel")]
pub(crate) fn chunks_mut_indexed<T, F>(data: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn chunks_mut_indexed<T, F>(data: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    data.chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
}

/// Run `f(chunk_index, a_chunk, b_chunk)` over two buffers chunked in lockstep.
#[cfg(feature = "parallel")]
pub(crate) fn chunks2_mut_indexed<A, B, F>(a: &mut [A], b: &mut [B], size_a: usize, size_b: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    use rayon::prelude::*;
    a.par_chunks_mut(size_a)
        .zip(b.par_chunks_mut(size_b))
        .enumerate()
        .for_each(|(i, (ca, cb))| f(i, ca, cb));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn chunks2_mut_indexed<A, B, F>(a: &mut [A], b: &mut [B], size_a: usize, size_b: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    a.chunks_mut(size_a)
        .zip(b.chunks_mut(size_b))
        .enumerate()
        .for_each(|(i, (ca, cb))| f(i, ca, cb));
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    (0..n).map(f).collect()
}

/// True when the parallel feature is compiled in.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
