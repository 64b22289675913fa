//! Execution policy for the data-parallel kernels.
//!
//! Every parallel loop here splits work into chunks whose boundaries do not
//! depend on the number of worker threads, so both policies produce
//! bit-identical results. Without the `parallel` feature the parallel policy
//! falls back to the sequential one.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<I, R, F>(exec: Exec, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let a = map_range(Exec::Sequential, 100, |i| i * i);
        let b = map_range(Exec::Parallel, 100, |i| i * i);
        assert_eq!(a, b);

        let mut x = vec![0usize; 37];
        let mut y = vec![0usize; 37];
        for_each_chunk_mut(Exec::Sequential, &mut x, 5, |ci, c| {
            c.iter_mut().enumerate().for_each(|(j, v)| *v = ci * 5 + j)
        });
        for_each_chunk_mut(Exec::Parallel, &mut y, 5, |ci, c| {
            c.iter_mut().enumerate().for_each(|(j, v)| *v = ci * 5 + j)
        });
        assert_eq!(x, y);
        assert_eq!(x, (0..37).collect::<Vec<_>>());
    }
}
