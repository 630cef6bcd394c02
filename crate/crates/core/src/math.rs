//! Small numeric helpers shared by the CRF and the tests.

/// Stable two-argument log-sum-exp.
#[inline(always)]
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Stable log-sum-exp over a slice. Returns -inf on an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive_in_safe_range() {
        let vals = [0.5f64, 2.0, -1.0];
        let naive = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&vals) - naive).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        // naive exp overflows here
        let vals = [1234.0, 1232.0];
        let expected = 1234.0 + (1.0f64 + (-2.0f64).exp()).ln();
        assert!((logsumexp(&vals) - expected).abs() < 1e-9);
        assert!((logsumexp2(1234.0, 1232.0) - expected).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_empty_is_neg_inf() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn logsumexp2_handles_neg_inf() {
        assert_eq!(
            logsumexp2(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
        assert!((logsumexp2(f64::NEG_INFINITY, 2.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
