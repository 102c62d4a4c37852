//! Thin seam between the rayon-backed and sequential execution paths.
//!
//! Batch generation, evaluation sweeps and Monte-Carlo loops are all
//! embarrassingly parallel over an index range. Everything funnels through
//! [`map_indexed`], which collects results *in index order* so reductions
//! (gradient sums, metric averages) are bit-identical regardless of thread
//! count or whether the `parallel` feature is enabled at all.

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept around as the reference implementation the
/// benches compare against.
pub fn map_indexed_serial<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Cap the worker pool at `n` threads. Must be called before the first
/// parallel operation; later calls are ignored (rayon's global pool can only
/// be built once). A no-op without the `parallel` feature.
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_serial_agree_elementwise() {
        let f = |i: usize| (i as f64).sqrt() * 3.0 - 1.0;
        assert_eq!(map_indexed(1000, f), map_indexed_serial(1000, f));
    }

    #[test]
    fn order_is_index_order() {
        let out = map_indexed(64, |i| i);
        assert_eq!(out, (0..64).collect::<Vec<_>>());
    }
}
