//! Sequential / rayon dispatch for the data-parallel batch loops.
//!
//! All fan-out in this crate goes through [`ordered_map`], which preserves
//! input order. Reductions then fold the ordered results, so every public
//! result is bit-identical whether the `parallel` feature is on or off and
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Rayon
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

impl Parallelism {
    pub fn describe(self) -> &'static str {
        match self {
            Parallelism::Sequential => "sequential",
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => "rayon",
        }
    }
}

/// Map `f` over `0..n`, returning results in index order.
pub fn ordered_map<U, F>(par: Parallelism, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Map `f` over the items of a slice, returning results in input order.
pub fn ordered_map_slice<T, U, F>(par: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match par {
        Parallelism::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_preserves_order() {
        let seq = ordered_map(Parallelism::Sequential, 100, |i| i * i);
        assert_eq!(seq, (0..100).map(|i| i * i).collect::<Vec<_>>());
        #[cfg(feature = "parallel")]
        {
            let par = ordered_map(Parallelism::Rayon, 100, |i| i * i);
            assert_eq!(seq, par);
        }
    }
}
