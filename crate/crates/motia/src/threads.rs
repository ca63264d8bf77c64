//! Internal parallelism, capped by the `MOTIA_THREADS` environment variable.

use rayon::prelude::*;

pub const THREADS_VAR: &str = "MOTIA_THREADS";

/// Thread cap from `MOTIA_THREADS`, or `None` when unset or unparsable.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_VAR).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Sizes the global pool once; later calls keep the existing pool.
pub fn configure() -> usize {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    if builder.build_global().is_err() {
        log::debug!("thread pool already configured");
    }
    rayon::current_num_threads()
}

/// `f` over `items` in parallel, results in input order.
pub fn map_ordered<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_results() {
        let v: Vec<u64> = (0..50).collect();
        assert_eq!(map_ordered(&v, |x| x * x), v.iter().map(|x| x * x).collect::<Vec<_>>());
    }
}
