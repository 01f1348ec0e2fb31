//! Execution policy for the per-path loops.
//!
//! Every reduction goes through fixed-size chunks whose partial results are
//! combined in chunk order, so a result never depends on how many worker
//! threads ran the chunks. Without the `parallel` feature both variants run
//! on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Paths per reduction chunk. Changing it changes floating point summation
/// order and therefore the low bits of every ensemble statistic.
pub const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `(0..n).map(f).collect()`, in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Calls `f(i, row_i)` for consecutive rows of width `width`.
    pub fn for_each_row<T, F>(self, data: &mut [T], width: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
        data.chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }

    /// Deterministic chunked reduction over `0..n`.
    ///
    /// `fold` consumes one chunk (a range of indices) into a partial value;
    /// partials are merged left to right with `merge`.
    pub fn reduce<T, F, M>(self, n: usize, fold: F, merge: M) -> Option<T>
    where
        T: Send,
        F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
        M: Fn(T, T) -> T,
    {
        let chunks = n.div_ceil(CHUNK);
        let partials = self.map(chunks, |c| fold(c * CHUNK..((c + 1) * CHUNK).min(n)));
        partials.into_iter().reduce(merge)
    }

    /// Deterministic sum of `f(i)` over `0..n`.
    pub fn sum<F>(self, n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        self.reduce(n, |r| r.map(&f).sum::<f64>(), |a, b| a + b)
            .unwrap_or(0.0)
    }

    /// Deterministic elementwise sum of vector-valued `f(i, acc)` contributions.
    pub fn sum_vec<F>(self, n: usize, len: usize, f: F) -> Vec<f64>
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        self.reduce(
            n,
            |r| {
                let mut acc = vec![0.0; len];
                for i in r {
                    f(i, &mut acc);
                }
                acc
            },
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        )
        .unwrap_or_else(|| vec![0.0; len])
    }

    /// Deterministic maximum; `NaN` contributions are ignored.
    pub fn max<F>(self, n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        self.reduce(n, |r| r.map(&f).fold(f64::NEG_INFINITY, f64::max), f64::max)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_agree_across_policies() {
        let f = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64);
        let a = Exec::Sequential.sum(10_000, f);
        let b = Exec::Parallel.sum(10_000, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let v = Exec::Parallel.map(5000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn empty_reductions() {
        assert_eq!(Exec::Parallel.sum(0, |_| 1.0), 0.0);
        assert_eq!(Exec::Parallel.sum_vec(0, 3, |_, _| ()), vec![0.0; 3]);
        assert_eq!(Exec::Sequential.max(0, |_| 1.0), f64::NEG_INFINITY);
    }
}
