use rayon::prelude::*;

/// Maps `f` over `items` on a pool of `workers` threads; results keep input order.
pub(crate) fn ordered_map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("falling back to sequential evaluation: {e}");
            items.iter().map(f).collect()
        }
    }
}
