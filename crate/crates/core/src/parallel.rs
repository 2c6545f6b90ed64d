//! Independent-run parallelism. With the `parallel` feature off everything
//! here runs sequentially with identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f` once per seed, returning results in seed order.
///
/// Runs share nothing, so the output does not depend on scheduling.
pub fn run_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        seeds.par_iter().map(|&s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

/// Order-preserving map over a slice.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_order_preserved() {
        let out = run_seeds(&[5, 1, 9], |s| s * 2);
        assert_eq!(out, vec![10, 2, 18]);
        assert_eq!(map(&[1.0f64, 4.0], |v| v.sqrt()), vec![1.0, 2.0]);
        assert!(threads() >= 1);
    }
}
