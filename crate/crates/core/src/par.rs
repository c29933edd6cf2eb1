//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps below run on the rayon pool; without
//! it they run on the calling thread. Both paths return results in input
//! order, and reductions are always folded sequentially over fixed chunks, so
//! numeric results are identical whichever path is compiled in.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps `f` over fixed-size chunks of `items`, preserving chunk order.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk).map(f).collect()
    }
}

/// Sums equally sized gradient buffers in order into the first one.
pub fn sum_in_order(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    let mut acc = parts.remove(0);
    for p in &parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

/// True when the crate was compiled with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<usize> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert!(ys.iter().enumerate().all(|(i, y)| *y == 2 * i));
        assert_eq!(map_range(5, |i| i), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn chunk_reduction_is_ordered() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let parts = map_chunks(&xs, 7, |c| vec![c.iter().sum::<f64>()]);
        let seq: f64 = xs.chunks(7).map(|c| c.iter().sum::<f64>()).fold(0.0, |a, b| a + b);
        assert_eq!(sum_in_order(parts)[0].to_bits(), seq.to_bits());
    }
}
