//! Dispatch points for data parallelism.
//!
//! With the `parallel` feature (default) these fan out over the current
//! rayon pool; without it they run sequentially. Callers only hand over
//! disjoint output chunks and fixed-order inner reductions, so both paths
//! produce bitwise-identical results.

/// Splits `data` into consecutive `chunk_len` slices and runs
/// `body(chunk_index, chunk)` on each.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, body: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| body(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            body(i, c);
        }
    }
}

/// Maps `body` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, body: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(body).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(body).collect()
    }
}
