//! Dense linear algebra, stable softmax/entropy and the seeded generator.

mod matrix;
mod rng;

pub use matrix::{dot, norm2, Matrix};
pub use rng::{splitmix64, Rng};

use crate::error::{Error, Result};

/// Softmax over the positions where `valid` is true, computed with
/// max-subtraction. Invalid positions come out as exactly zero.
pub fn stable_softmax_row(logits: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != valid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logits vs {} mask entries",
            logits.len(),
            valid.len()
        )));
    }
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (&x, &ok) in logits.iter().zip(valid) {
        if ok {
            if !x.is_finite() {
                return Err(Error::NonFinite("softmax logits".into()));
            }
            any = true;
            max = max.max(x);
        }
    }
    if !any {
        return Err(Error::EmptySupport);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(valid)
        .map(|(&x, &ok)| if ok { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Softmax over a causal prefix: positions `0..=last` are valid.
pub fn causal_softmax_row(logits: &[f64], last: usize) -> Result<Vec<f64>> {
    let valid: Vec<bool> = (0..logits.len()).map(|j| j <= last).collect();
    stable_softmax_row(logits, &valid)
}

/// `log Σ exp(x)` over all entries.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Shannon entropy in nats, with `0 · log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    let mut total = 0.0;
    for &x in p {
        if !x.is_finite() || x < 0.0 || x > 1.0 + DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entry {x} outside [0, 1]")));
        }
        total += x;
    }
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_softmax() {
        let p = stable_softmax_row(&[0.0, 0.0, 0.0], &[true; 3]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log3_ratio() {
        for x in [-50.0, 0.0, 3.7, 700.0] {
            let p = stable_softmax_row(&[x, x + 3f64.ln()], &[true, true]).unwrap();
            assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = stable_softmax_row(&[1000.0, 1001.0], &[true, true]).unwrap();
        // exact softmax of [0, 1]
        let e = 1f64.exp();
        let expected = [1.0 / (1.0 + e), e / (1.0 + e)];
        assert!((p[0] - expected[0]).abs() < 1e-15);
        assert!((p[1] - expected[1]).abs() < 1e-15);
        assert!((p[0] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn invalid_positions_are_zero() {
        let p = stable_softmax_row(&[5.0, 1.0, 9.0], &[true, true, false]).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_support_errors() {
        assert!(matches!(stable_softmax_row(&[1.0, 2.0], &[false, false]), Err(Error::EmptySupport)));
        assert!(stable_softmax_row(&[f64::NAN], &[true]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = shannon_entropy(&[0.125; 8]).unwrap();
        assert!((h - 8f64.ln()).abs() < 1e-12);
        // -(0.25 ln 0.25 + 0.75 ln 0.75)
        let h = shannon_entropy(&[0.25, 0.75]).unwrap();
        let direct = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn entropy_rejects_bad_vectors() {
        assert!(shannon_entropy(&[-0.1, 1.1]).is_err());
        assert!(shannon_entropy(&[0.5, 0.4]).is_err());
        assert!(shannon_entropy(&[]).is_err());
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(-3.0) - 0.048_587_351_573_742).abs() < 1e-12);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(xs in prop::collection::vec(-30.0f64..30.0, 1..40), pick in 0usize..3) {
            let c = [-1000.0, 0.0, 1000.0][pick];
            let valid = vec![true; xs.len()];
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = stable_softmax_row(&xs, &valid).unwrap();
            let b = stable_softmax_row(&shifted, &valid).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn entropy_bounds(xs in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let p = stable_softmax_row(&xs, &vec![true; xs.len()]).unwrap();
            let h = shannon_entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (xs.len() as f64).ln() + 1e-12);
        }
    }
}
