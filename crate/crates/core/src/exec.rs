//! Execution policy for the data-parallel loops.
//!
//! Every parallel map collects results in index order and all reductions are
//! folded sequentially afterwards, so outputs are identical across policies
//! and thread counts. Without the `parallel` feature, [`Exec::Parallel`]
//! silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `f(0), f(1), ..., f(n - 1)` in order.
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

    /// Ordered sum of `f(i)`; the summation order is the index order for both policies.
    pub fn sum<F>(self, n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        self.map(n, f).into_iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree_bitwise() {
        let f = |i: usize| (i as f64).sqrt().sin() * 1e-3;
        let a = Exec::Sequential.sum(10_000, f);
        let b = Exec::Parallel.sum(10_000, f);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(Exec::Parallel.map(5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
