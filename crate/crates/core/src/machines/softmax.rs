//! Max-shifted log-sum-exp and softmax helpers.

/// Smallest shifted exponent that still produces a nonzero `exp`.
pub(crate) const EXP_UNDERFLOW: f64 = -745.2;

/// `log(sum(exp(x)))`, stable for any magnitude. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| shifted_exp(x - max)).sum();
    max + sum.ln()
}

#[inline]
pub(crate) fn shifted_exp(z: f64) -> f64 {
    if z < EXP_UNDERFLOW {
        0.0
    } else {
        z.exp()
    }
}

/// Normalized log-weights and weights of a vector of logits.
///
/// Weights are the shifted exponentials divided by their sum, so they sum to
/// one to rounding even when the logits are huge and `max + ln(sum)` would
/// lose the low-order digits.
pub fn softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (vec![max; logits.len()], vec![f64::NAN; logits.len()]);
    }
    let e: Vec<f64> = logits.iter().map(|&x| shifted_exp(x - max)).collect();
    let sum: f64 = e.iter().sum();
    let ln_sum = sum.ln();
    let log_w = logits.iter().map(|&x| (x - max) - ln_sum).collect();
    let w = e.iter().map(|v| v / sum).collect();
    (log_w, w)
}

/// Positions of the `k` largest logits, returned in ascending position order.
/// Ties are broken toward the lower position.
pub fn top_k_positions(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if k < order.len() {
        let cmp = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct_for_small_inputs() {
        let xs = [0.1, -0.3, 2.0];
        let direct = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-15);
    }

    #[test]
    fn lse_survives_huge_magnitudes() {
        assert_eq!(log_sum_exp(&[1e308, 1e308 - 1e300]), 1e308);
        let v = log_sum_exp(&[-1e6, -1e6]);
        assert!((v - (-1e6 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_sums_to_one() {
        let (lw, w) = softmax(&[-5e4, -5e4 + 3.0, 17.0, -1e9]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert_eq!(lw.len(), 4);
    }

    #[test]
    fn top_k_prefers_lower_index_on_ties() {
        assert_eq!(top_k_positions(&[1.0, 3.0, 3.0, 0.0], 1), vec![1]);
        assert_eq!(top_k_positions(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_positions(&[1.0, 2.0], 5), vec![0, 1]);
    }
}
