//! Thin switch between rayon and sequential iteration.
//!
//! Every helper preserves input order, so results do not depend on the
//! `parallel` feature or on the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
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

/// Runs `f` over consecutive mutable chunks of `items` and returns the
/// per-chunk results in chunk order. `f` receives the chunk's start offset.
pub fn map_chunks_mut<A, R, F>(items: &mut [A], chunk: usize, f: F) -> Vec<R>
where
    A: Send,
    R: Send,
    F: Fn(usize, &mut [A]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        items
            .par_chunks_mut(chunk)
            .enumerate()
            .map(|(k, c)| f(k * chunk, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items
            .chunks_mut(chunk)
            .enumerate()
            .map(|(k, c)| f(k * chunk, c))
            .collect()
    }
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
