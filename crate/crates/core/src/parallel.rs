//! Order-preserving data parallelism.
//!
//! [`pmap`] is the single entry point used for every embarrassingly
//! parallel loop in the workspace (episode generation, per-example
//! gradients, per-episode metrics). It always returns results in input
//! order, and reductions over its output are written sequentially, so
//! numerical results are bit-identical no matter the thread count.
//! Without the `parallel` feature it degrades to a plain map.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order matches input order.
pub fn pmap<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Sequential map with the same signature as [`pmap`]; the criterion
/// benches use it as the baseline side of the comparison.
pub fn smap<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Configure the global thread pool. A no-op without the feature or if
/// the pool was already built.
pub fn set_workers(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}
