use ::rayon::prelude::*;

/// Applies `f` to every index in `0..n`, in parallel, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Applies `f` to every item, in parallel, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Installs a global pool with at most `threads` workers. Later calls are ignored.
pub fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = ::rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn is_parallel() -> bool {
    true
}
