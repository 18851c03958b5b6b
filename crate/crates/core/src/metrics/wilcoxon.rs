//! Exact two-sided Wilcoxon signed-rank test for small samples.

use crate::error::{Error, Result};

/// Largest effective sample size the exact test accepts.
pub const MAX_EXACT_N: usize = 25;

/// Exact two-sided Wilcoxon signed-rank test on paired scores.
///
/// Zero differences are dropped; absolute differences are ranked with mean
/// ranks for ties; `W = min(W+, W-)`. The two-sided p-value is the exact
/// probability, over all `2^n` equiprobable sign assignments of the observed
/// ranks, of `min(W+, W-) <= W`.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate(
            "all paired differences are zero; the signed-rank test is undefined".into(),
        ));
    }
    let n = diffs.len();
    if n > MAX_EXACT_N {
        return Err(Error::Input(format!(
            "effective sample size {n} exceeds the exact enumeration limit {MAX_EXACT_N}"
        )));
    }
    let ranks = mean_ranks(&diffs);
    let w_plus: f64 = diffs
        .iter()
        .zip(ranks.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let p = exact_min_statistic_p(&ranks, w);
    Ok((w, p))
}

/// Ranks of |diffs| (1-based), ties receiving the mean of their rank span.
fn mean_ranks(diffs: &[f64]) -> Vec<f64> {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Exact P(min(W+, W-) <= w) over all sign assignments, computed by dynamic
/// programming over the distribution of W+ (ranks doubled so mean ranks stay
/// integral).
fn exact_min_statistic_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<u64> = ranks.iter().map(|r| (r * 2.0).round() as u64).collect();
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0u64;
    for &r in &doubled {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s as usize] += counts[(s - r) as usize];
        }
    }
    let threshold = (w * 2.0).round() as u64;
    let n_assignments = 2f64.powi(ranks.len() as i32);
    let mut favorable = 0.0;
    for (s, c) in counts.iter().enumerate() {
        let s = s as u64;
        let min_side = s.min(total - s);
        if min_side <= threshold {
            favorable += c;
        }
    }
    favorable / n_assignments
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal 2^n enumeration used as the independent oracle.
    pub(crate) fn brute_force_p(ranks: &[f64], w: f64) -> f64 {
        let n = ranks.len();
        assert!(n <= 20);
        let total: f64 = ranks.iter().sum();
        let mut favorable = 0u64;
        for assignment in 0u64..(1 << n) {
            let w_plus: f64 = (0..n)
                .filter(|i| assignment & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            if w_plus.min(total - w_plus) <= w + 1e-12 {
                favorable += 1;
            }
        }
        favorable as f64 / (1u64 << n) as f64
    }

    #[test]
    fn all_positive_n5() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, 0.0)).collect();
        let (w, p) = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(w, 0.0);
        assert!((p - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn negation_leaves_p_unchanged() {
        let pairs = vec![(1.5, 0.0), (-0.3, 0.0), (2.2, 0.0), (0.9, 0.0), (-4.0, 0.0), (0.1, 0.0)];
        let negated: Vec<(f64, f64)> = pairs.iter().map(|(a, b)| (*b, *a)).collect();
        let (w1, p1) = wilcoxon_signed_rank(&pairs).unwrap();
        let (w2, p2) = wilcoxon_signed_rank(&negated).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn zero_differences_are_dropped() {
        let pairs = vec![(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (4.0, 1.0), (5.0, 1.0), (6.0, 1.0)];
        let (w, p) = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(w, 0.0);
        assert!((p - 2.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_differences_error() {
        let pairs = vec![(1.0, 1.0), (2.0, 2.0)];
        assert!(matches!(
            wilcoxon_signed_rank(&pairs).unwrap_err(),
            Error::Degenerate(_)
        ));
    }

    #[test]
    fn dp_matches_brute_force_with_ties() {
        let diffs = vec![1.0, -1.0, 2.0, 2.0, -3.0, 4.0, 4.0, 5.0];
        let ranks = mean_ranks(&diffs);
        let w: f64 = 3.0;
        let dp = exact_min_statistic_p(&ranks, w);
        let brute = brute_force_p(&ranks, w);
        assert!((dp - brute).abs() < 1e-12, "dp {dp} vs brute {brute}");
    }

    #[test]
    fn dp_matches_brute_force_random_cases() {
        use crate::numerics::RngState;
        let mut rng = RngState::new(99);
        for n in 1..=12 {
            for _ in 0..5 {
                let pairs: Vec<(f64, f64)> = (0..n)
                    .map(|_| {
                        let mag = (rng.next_below(6) + 1) as f64 / 2.0;
                        let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                        (sign * mag, 0.0)
                    })
                    .collect();
                let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
                let ranks = mean_ranks(&diffs);
                let (w, p) = wilcoxon_signed_rank(&pairs).unwrap();
                let brute = brute_force_p(&ranks, w);
                assert!((p - brute).abs() < 1e-12, "n={n}: dp {p} vs brute {brute}");
            }
        }
    }
}
