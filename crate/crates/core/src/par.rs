//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the `map_*` helpers fan out over
//! rayon; without it they run on the calling thread. Output order always
//! matches input order, so results are identical either way.

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Always-sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Maps `f` over the fixed-width rows of a flat row-major buffer.
#[cfg(feature = "parallel")]
pub fn map_rows<T, F>(data: &[f32], width: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f32]) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if width == 0 {
        return Vec::new();
    }
    data.par_chunks_exact(width).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_rows<T, F>(data: &[f32], width: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f32]) -> T + Sync + Send,
{
    map_rows_seq(data, width, f)
}

/// Always-sequential twin of [`map_rows`].
pub fn map_rows_seq<T, F>(data: &[f32], width: usize, f: F) -> Vec<T>
where
    F: Fn(&[f32]) -> T,
{
    if width == 0 {
        return Vec::new();
    }
    data.chunks_exact(width).map(f).collect()
}

/// Caps the global worker pool. No-op without the `parallel` feature.
/// Returns false if the pool was already initialised.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}

pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
