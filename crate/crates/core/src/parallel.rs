//! Thin worker-pool shim: rayon when the `parallel` feature is on (default),
//! a serial loop otherwise (single-threaded targets such as wasm).

#[cfg(feature = "parallel")]
pub fn map_collect<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}
