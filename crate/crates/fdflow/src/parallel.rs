//! Thin wrappers over rayon so the crate builds with `--no-default-features`
//! (single-threaded, e.g. for wasm) without touching the call sites.
//!
//! All parallel loops in this crate split work along the batch dimension or
//! into fixed-size chunks, so results are bit-identical for any thread count.

#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) {
    // Ignore the error from configuring twice; the first pool wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) {}

#[cfg(feature = "parallel")]
pub fn current_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
pub fn current_threads() -> usize {
    1
}

/// `(0..n).map(f)` collected in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Applies `f` to equally sized mutable chunks of `data`, passing the chunk index.
/// `data.len()` must be a multiple of `chunk`.
#[cfg(feature = "parallel")]
pub fn par_chunks_mut<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    use rayon::prelude::*;
    debug_assert_eq!(data.len() % chunk, 0);
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn par_chunks_mut<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    debug_assert_eq!(data.len() % chunk, 0);
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
