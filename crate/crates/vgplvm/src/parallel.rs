//! Chunked map/reduce over data points.
//!
//! Reductions are performed over fixed-size index chunks whose partial
//! results are combined in chunk order. Because the chunk boundaries do not
//! depend on the thread count, results are bitwise identical whether the
//! `parallel` feature is enabled or not, and for any rayon pool size.

/// Number of data points handled per reduction chunk.
pub const CHUNK: usize = 64;

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| (c * CHUNK)..(((c + 1) * CHUNK).min(n)))
        .collect()
}

/// Map each chunk of `0..n` to a partial value, then fold the partials in
/// chunk order with `combine`.
#[cfg(feature = "parallel")]
pub fn chunked_reduce<T, F, C>(n: usize, map: F, combine: C) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    use rayon::prelude::*;
    let partials: Vec<T> = chunk_ranges(n).into_par_iter().map(map).collect();
    partials.into_iter().reduce(combine)
}

#[cfg(not(feature = "parallel"))]
pub fn chunked_reduce<T, F, C>(n: usize, map: F, combine: C) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    chunk_ranges(n).into_iter().map(map).reduce(combine)
}

/// Run `fill` on disjoint row chunks of an output buffer of `n` logical rows,
/// where row `i` owns `stride` consecutive elements.
#[cfg(feature = "parallel")]
pub fn chunked_fill<F>(out: &mut [f64], n: usize, stride: usize, fill: F)
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(CHUNK * stride)
        .zip(chunk_ranges(n).into_par_iter())
        .for_each(|(buf, range)| fill(range, buf));
}

#[cfg(not(feature = "parallel"))]
pub fn chunked_fill<F>(out: &mut [f64], n: usize, stride: usize, fill: F)
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync + Send,
{
    for (buf, range) in out.chunks_mut(CHUNK * stride).zip(chunk_ranges(n)) {
        fill(range, buf);
    }
}
