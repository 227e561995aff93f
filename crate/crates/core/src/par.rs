//! Data-parallel execution helpers.
//!
//! Every helper keeps results in input order and performs reductions in a
//! fixed left-to-right order over fixed-size chunks, so the numeric result is
//! bitwise identical whether the work ran on the rayon pool or sequentially.
//! Without the `parallel` feature, [`Execution::Parallel`] silently degrades
//! to sequential execution.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = exec;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Maps `f` over index range `0..n`, preserving order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Folds `items` in chunks of `chunk` elements. Each chunk is folded
/// sequentially from `init()`, then chunk results are merged left to right.
/// Chunk boundaries depend only on `chunk`, never on the thread count.
pub fn chunked_fold<T, A, I, F, M>(
    exec: Execution,
    items: &[T],
    chunk: usize,
    init: I,
    fold: F,
    merge: M,
) -> Option<A>
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize, &T) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunk = chunk.max(1);
    let n_chunks = items.len().div_ceil(chunk);
    let partials = map_range(exec, n_chunks, |c| {
        let start = c * chunk;
        let end = (start + chunk).min(items.len());
        let mut acc = init();
        for (i, item) in items[start..end].iter().enumerate() {
            fold(&mut acc, start + i, item);
        }
        acc
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next()?;
    for part in iter {
        merge(&mut total, part);
    }
    Some(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u32> = (0..100).collect();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let ys = map(exec, &xs, |i, x| (i as u32) + x);
            assert_eq!(ys, (0..100).map(|x| 2 * x).collect::<Vec<_>>());
        }
    }

    #[test]
    fn chunked_fold_is_execution_independent() {
        let xs: Vec<f64> = (0..1000).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let run = |exec| {
            chunked_fold(exec, &xs, 7, || 0.0f64, |a, _, x| *a += x, |a, b| *a += b).unwrap()
        };
        assert_eq!(
            run(Execution::Sequential).to_bits(),
            run(Execution::Parallel).to_bits()
        );
        let empty: Vec<f64> = vec![];
        assert!(chunked_fold(Execution::Sequential, &empty, 4, || 0.0, |_, _, _| {}, |_, _| {})
            .is_none());
    }
}
