//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, work runs on a rayon pool; without it every
//! helper degrades to a plain iterator. Output order always matches input
//! order, so results never depend on the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when `parallel` is set and the feature
/// is enabled.
pub fn map_ordered<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Runs `f` inside a pool of `workers` threads. Sequential builds ignore the
/// count.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(f);
        }
    }
    let _ = workers;
    f()
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map_ordered(&xs, false, |x| x * x);
        let par = with_workers(4, || map_ordered(&xs, true, |x| x * x));
        assert_eq!(seq, par);
    }
}
