//! Process-wide worker pool.
//!
//! `MIMK_THREADS` caps the number of workers (default: available cores).
//! Work is only ever split so that each output element is computed by the
//! same sequence of floating point operations regardless of the split, and
//! reductions across workers are folded sequentially in input order. Results
//! are therefore bit-identical for any thread count.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn configured_threads() -> usize {
    std::env::var("MIMK_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(configured_threads())
            .build()
            .expect("thread pool")
    })
}

/// Maps `f` over `items` on the pool, returning results in input order.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if items.len() < 2 || pool().current_num_threads() == 1 {
        return items.iter().map(f).collect();
    }
    pool().install(|| items.par_iter().map(f).collect())
}
