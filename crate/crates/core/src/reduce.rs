//! Order-fixed reductions.
//!
//! Sums are split at fixed midpoints regardless of how many worker threads
//! rayon has, so the rounding sequence and therefore the result never depend
//! on the thread count.

const LEAF: usize = 1024;

/// Pairwise sum with a fixed split tree.
pub fn tree_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    let (lo, hi) = values.split_at(mid);
    let (a, b) = rayon::join(|| tree_sum(lo), || tree_sum(hi));
    a + b
}
