//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) [`Exec::Parallel`] runs on the
//! rayon global pool; without it every call runs sequentially. Results are
//! always returned in index order, so callers see identical output either way.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `f(i)` for `i in 0..n`, in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// `f` over the items of a slice, in order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }

    /// Sum of `f(i)` over `0..n` for integer-valued work, so the result does
    /// not depend on reduction order.
    pub fn sum_u64<F>(self, n: usize, f: F) -> u64
    where
        F: Fn(usize) -> u64 + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).sum()
            }
            _ => (0..n).map(f).sum(),
        }
    }

    /// Smallest `i` in `0..n` with `f(i)` true.
    pub fn find_first<F>(self, n: usize, f: F) -> Option<usize>
    where
        F: Fn(usize) -> bool + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().find_first(|&i| f(i))
            }
            _ => (0..n).find(|&i| f(i)),
        }
    }
}
