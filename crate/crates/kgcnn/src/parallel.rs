//! Data-parallel helpers with a sequential fallback.
//!
//! The hot loops (batch convolution, per-patch inference, dataset synthesis)
//! are embarrassingly parallel over an index. Every element is written by
//! exactly one task and reductions are performed sequentially in index order,
//! so results are bit-identical whether or not the `parallel` feature is on.

/// Run `f(i, chunk_i)` over consecutive equally sized chunks of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, use_parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if use_parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = use_parallel;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, use_parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if use_parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = use_parallel;
    (0..n).map(f).collect()
}

/// Whether this build defaults to parallel execution.
pub fn default_parallel() -> bool {
    cfg!(feature = "parallel")
}
