//! Execution-mode plumbing: data-parallel map with a sequential fallback.
//!
//! Work items (per-window forward/backward passes) are independent, so they
//! can be mapped in parallel and collected back in input order. All
//! reductions happen sequentially over the ordered results, which keeps
//! training bit-identical across modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    /// Uses a rayon thread pool when the `parallel` feature is enabled;
    /// otherwise identical to `Sequential`.
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn parse(s: &str) -> Option<ExecMode> {
        match s {
            "sequential" => Some(ExecMode::Sequential),
            "parallel" => Some(ExecMode::Parallel),
            _ => None,
        }
    }
}

/// Applies `f` to every index/item pair, returning results in input order.
pub fn map_indexed<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    match mode {
        ExecMode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let items: Vec<f64> = (0..250).map(|i| (i as f64) * 0.731 - 17.0).collect();
        let f = |i: usize, x: &f64| (x.sin() * (i as f64 + 1.0).sqrt()).exp();
        let seq = map_indexed(ExecMode::Sequential, &items, f);
        let par = map_indexed(ExecMode::Parallel, &items, f);
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn order_is_preserved() {
        let items: Vec<usize> = (0..1000).collect();
        let out = map_indexed(ExecMode::Parallel, &items, |i, &x| {
            assert_eq!(i, x);
            x * 2
        });
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * 2);
        }
    }
}
