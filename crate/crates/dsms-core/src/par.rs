//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the map helpers fan work
//! out over rayon; without it they degrade to plain iteration. Results
//! are always collected in input order and reduced sequentially, so
//! floating-point output is identical in both modes.
//!
//! [`run_sequential`] forces the sequential path at runtime on the calling
//! thread, which is what the benchmark suite uses to compare both modes
//! inside one binary.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

thread_local! {
    static FORCE_SEQ: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with the parallel helpers pinned to their sequential path on
/// this thread.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQ.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

fn sequential_forced() -> bool {
    FORCE_SEQ.with(Cell::get)
}

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_collect<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if sequential_forced() {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Map `f` over indices `0..n`, preserving order.
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    let indices: Vec<usize> = (0..n).collect();
    map_collect(&indices, |&i| f(i))
}
