//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits work into units whose results do not depend on how the
//! units are scheduled, so the parallel and sequential paths agree bit for bit.
//! With the `parallel` feature the work is handed to rayon unless
//! [`set_sequential`] has been called; without it everything runs inline.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces the sequential path at runtime (used by benches to compare both).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Maps `f` over two parallel mutable chunkings (`a` by `a_len`, `b` by `b_len`).
/// Both slices must split into the same number of chunks.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    assert!(a_len > 0 && b_len > 0, "chunk length must be positive");
    assert_eq!(
        a.len().div_ceil(a_len),
        b.len().div_ceil(b_len),
        "chunk counts differ"
    );
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            a.par_chunks_mut(a_len)
                .zip(b.par_chunks_mut(b_len))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
            return;
        }
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_and_indexed_agree_with_sequential() {
        let mut v: Vec<u64> = (0..1000).collect();
        for_each_chunk_mut(&mut v, 7, |i, c| {
            for x in c.iter_mut() {
                *x = *x * 3 + i as u64;
            }
        });
        let expected: Vec<u64> = (0..1000u64).map(|x| x * 3 + x / 7).collect();
        assert_eq!(v, expected);

        let squares = map_indexed(50, |i| i * i);
        assert_eq!(squares, (0..50).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn pair_chunks_line_up() {
        let mut a = vec![0usize; 12];
        let mut b = vec![0usize; 4];
        for_each_chunk_pair_mut(&mut a, 3, &mut b, 1, |i, x, y| {
            x.iter_mut().for_each(|v| *v = i);
            y[0] = i * 10;
        });
        assert_eq!(a, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert_eq!(b, vec![0, 10, 20, 30]);
    }
}
