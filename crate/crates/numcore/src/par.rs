//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper partitions work by output element (or output row), so the
//! parallel and sequential paths perform the same floating-point operations
//! in the same order and agree bit-for-bit.

/// Execution policy for the row-partitioned kernels.
///
/// `Parallel` silently degrades to sequential when the crate is built
/// without the `parallel` feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
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

/// Sums integer vectors element-wise; order independent by construction.
pub fn sum_counts(exec: Execution, parts: Vec<Vec<u64>>, len: usize) -> Vec<u64> {
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return parts
            .into_par_iter()
            .reduce(|| vec![0; len], |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            });
    }
    let _ = exec;
    parts.into_iter().fold(vec![0; len], |mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let seq = map_range(Execution::Sequential, 100, |i| i * i);
        let par = map_range(Execution::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn chunked_writes_cover_everything() {
        let mut a = vec![0usize; 37];
        for_each_chunk_mut(Execution::Parallel, &mut a, 5, |ci, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = ci * 5 + j;
            }
        });
        assert!(a.iter().enumerate().all(|(i, &v)| i == v));
    }

    #[test]
    fn counts_reduce() {
        let parts = vec![vec![1, 2], vec![3, 4], vec![5, 6]];
        assert_eq!(sum_counts(Execution::Parallel, parts, 2), vec![9, 12]);
    }
}
