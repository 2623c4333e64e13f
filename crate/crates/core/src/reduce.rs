//! Floating-point reductions with a selectable summation order.
//!
//! `Deterministic` splits the input into fixed-size chunks, sums each chunk
//! sequentially (chunks in parallel), then combines the partial sums in a
//! fixed pairwise tree. The result is independent of the thread schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Deterministic,
    Unordered,
}

impl Reduction {
    pub fn from_flag(reproducible: bool) -> Self {
        if reproducible {
            Reduction::Deterministic
        } else {
            Reduction::Unordered
        }
    }
}

/// Pairwise sum of `parts` in a fixed tree order.
pub fn tree_sum(parts: &[f64]) -> f64 {
    match parts.len() {
        0 => 0.0,
        1 => parts[0],
        n => {
            let mid = n / 2;
            tree_sum(&parts[..mid]) + tree_sum(&parts[mid..])
        }
    }
}

/// Sum of `f(i)` for `i in 0..n`.
pub fn sum_by<F>(n: usize, mode: Reduction, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    match mode {
        Reduction::Deterministic => {
            let chunks = n.div_ceil(CHUNK);
            let parts: Vec<f64> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let lo = c * CHUNK;
                    let hi = (lo + CHUNK).min(n);
                    (lo..hi).map(&f).sum::<f64>()
                })
                .collect();
            tree_sum(&parts)
        }
        Reduction::Unordered => (0..n).into_par_iter().map(&f).sum(),
    }
}

pub fn dot(a: &[f64], b: &[f64], mode: Reduction) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_by(a.len(), mode, |i| a[i] * b[i])
}
