//! Slow exhaustive reference implementations in exact rational arithmetic.
//!
//! These deliberately use different formulas from the production code so that
//! agreement is meaningful. They back the unit tests and the `selftest`
//! command.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

fn q(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn qu(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// Rosin bin by squared point-to-line distance via Pythagoras:
/// `|P - A|^2 - ((P - A) . u)^2 / |u|^2` with `u = B - A`.
/// `None` when the peak is the last non-empty bin or the histogram is empty.
pub fn rosin_bin(counts: &[u64]) -> Option<usize> {
    let max = counts.iter().copied().max()?;
    if max == 0 {
        return None;
    }
    let peak = counts.iter().position(|&c| c == max)?;
    let tail = counts.iter().rposition(|&c| c > 0)?;
    if tail == peak {
        return None;
    }
    let (ax, ay) = (q(peak as i64), qu(counts[peak]));
    let (ux, uy) = (q(tail as i64) - &ax, qu(counts[tail]) - &ay);
    let uu = &ux * &ux + &uy * &uy;
    let mut best: Option<(BigRational, usize)> = None;
    for (b, &cb) in counts.iter().enumerate().take(tail + 1).skip(peak) {
        let (px, py) = (q(b as i64) - &ax, qu(cb) - &ay);
        let along = &px * &ux + &py * &uy;
        let d2 = &px * &px + &py * &py - &along * &along / &uu;
        if best.as_ref().is_none_or(|(bd, _)| d2 >= *bd) {
            best = Some((d2, b));
        }
    }
    best.map(|(_, b)| b)
}

/// Otsu boundary by the textbook `w0 * w1 * (mu0 - mu1)^2` with class weights
/// as fractions of the total and bin centers as positions. Ties resolve to the
/// lower median of all maximizing boundaries. `None` with fewer than two
/// non-empty bins.
pub fn otsu_boundary(counts: &[u64]) -> Option<usize> {
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: BigRational = counts.iter().map(|&c| qu(c)).sum();
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let center = |b: usize| q(b as i64) + &half;
    let mut scores = Vec::new();
    for k in 1..counts.len() {
        let n0: BigRational = counts[..k].iter().map(|&c| qu(c)).sum();
        let n1 = &total - &n0;
        if n0.is_zero() || n1.is_zero() {
            scores.push(BigRational::zero());
            continue;
        }
        let mu0: BigRational = counts[..k].iter().enumerate().map(|(b, &c)| center(b) * qu(c)).sum::<BigRational>() / &n0;
        let mu1: BigRational =
            counts[k..].iter().enumerate().map(|(b, &c)| center(b + k) * qu(c)).sum::<BigRational>() / &n1;
        let gap = mu0 - mu1;
        scores.push((&n0 / &total) * (&n1 / &total) * &gap * &gap);
    }
    let max = scores.iter().max()?.clone();
    let ties: Vec<usize> = scores.iter().enumerate().filter(|(_, s)| **s == max).map(|(i, _)| i + 1).collect();
    Some(ties[(ties.len() - 1) / 2])
}

/// Cohen's kappa from raw per-pixel labels, with the two-class chance term
/// built from marginal label frequencies. 0 when chance agreement is 1.
pub fn kappa_from_labels(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let n = qu(pred.len() as u64);
    let agree = qu(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as u64) / &n;
    let mut chance = BigRational::zero();
    for class in [false, true] {
        let p = qu(pred.iter().filter(|&&v| v == class).count() as u64) / &n;
        let t = qu(truth.iter().filter(|&&v| v == class).count() as u64) / &n;
        chance += p * t;
    }
    let one = q(1);
    if chance == one {
        return 0.0;
    }
    ((agree - &chance) / (one - chance)).to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{confusion, scores};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rosin_oracle_on_a_hand_checked_case() {
        // Line from (0, 10) to (4, 2): vertical gaps below it are 7, 5, 2 for bins 1..3.
        assert_eq!(rosin_bin(&[10, 1, 1, 2, 2]), Some(1));
        assert_eq!(rosin_bin(&[1, 2, 3]), None);
        assert_eq!(rosin_bin(&[0, 0]), None);
    }

    #[test]
    fn otsu_oracle_on_two_clusters() {
        assert_eq!(otsu_boundary(&[4, 4, 0, 0, 0, 4, 4]), Some(3));
        assert_eq!(otsu_boundary(&[0, 3, 0]), None);
    }

    #[test]
    fn kappa_oracle_agrees_with_confusion_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..300);
            let rate = rng.random_range(0.0..1.0);
            let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(rate)).collect();
            let pred: Vec<bool> = truth.iter().map(|&t| if rng.random_bool(0.2) { !t } else { t }).collect();
            let a = Array2::from_shape_vec((1, n), pred.clone()).unwrap();
            let b = Array2::from_shape_vec((1, n), truth.clone()).unwrap();
            let s = scores(&confusion(a.view(), b.view(), None).unwrap()).unwrap();
            assert!((s.kappa - kappa_from_labels(&pred, &truth)).abs() < 1e-12);
        }
    }
}
