//! Batch-level execution strategy.
//!
//! Every data-parallel loop in the crate (rollout batches, ensemble members,
//! evaluation episodes) goes through [`Execution::map`]. Results always come
//! back in input order, so reductions stay bit-reproducible regardless of the
//! worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses the rayon global pool when the `parallel` feature is enabled,
    /// otherwise falls back to sequential iteration.
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => (0..n).map(f).collect(),
        }
    }
}

/// Pairwise-tree sum of equally sized vectors in a fixed order.
pub fn tree_sum(mut parts: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// Scalar counterpart of [`tree_sum`].
pub fn tree_sum_scalar(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n.div_ceil(2);
            tree_sum_scalar(&values[..mid]) + tree_sum_scalar(&values[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<usize> = (0..100).collect();
        let seq = Execution::Sequential.map(&xs, |x| x * 2);
        let par = Execution::Parallel.map(&xs, |x| x * 2);
        assert_eq!(seq, par);
    }

    #[test]
    fn tree_sums() {
        let parts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(tree_sum(parts), Some(vec![9.0, 12.0]));
        assert_eq!(tree_sum(vec![]), None);
        assert_eq!(tree_sum_scalar(&[1.0, 2.0, 3.0, 4.0, 5.0]), 15.0);
        assert_eq!(tree_sum_scalar(&[]), 0.0);
    }
}
