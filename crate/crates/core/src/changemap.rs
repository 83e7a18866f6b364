//! Change intensity, histogram thresholding and binary change maps.
//!
//! Rosin picks the bin whose center lies farthest from the straight line
//! joining the histogram peak (first max-count bin) to the last non-empty
//! bin. Otsu picks the bin boundary maximizing between-class variance. Both
//! compare candidates in exact integer arithmetic, so ties are well defined:
//! Rosin prefers the larger bin index, Otsu takes the lower median of all
//! maximizing boundaries.
//!
//! Optional uncertainty gating: with a per-pixel log-variance map `s`, pixels
//! with `s` above the Rosin threshold of the `s` histogram get their intensity
//! scaled by `exp(-(s - s_thresh))` before thresholding.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis, Zip};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::FeatureMap;
use crate::Scalar;

pub const DEFAULT_BINS: usize = 256;

/// Pixelwise `1 - cos(f1, f2)` for (B, D, H, W) feature maps, in [0, 2].
/// A zero vector on either side scores 1.
pub fn intensity<T: Scalar>(f1: &FeatureMap<T>, f2: &FeatureMap<T>) -> Result<Array3<f64>> {
    ensure!(f1.dim() == f2.dim(), Shape, "feature maps differ in shape: {:?} vs {:?}", f1.dim(), f2.dim());
    let (b, _, h, w) = f1.dim();
    let mut out = Array3::<f64>::zeros((b, h, w));
    for n in 0..b {
        let a = f1.values.index_axis(Axis(0), n);
        let c = f2.values.index_axis(Axis(0), n);
        for i in 0..h {
            for j in 0..w {
                let (mut dot, mut na, mut nc) = (0.0f64, 0.0f64, 0.0f64);
                for d in 0..a.dim().0 {
                    let (x, y) = (a[[d, i, j]].as_f64(), c[[d, i, j]].as_f64());
                    dot += x * y;
                    na += x * x;
                    nc += y * y;
                }
                let denom = (na * nc).sqrt();
                out[[n, i, j]] = if denom < 1e-24 { 1.0 } else { (1.0 - dot / denom).clamp(0.0, 2.0) };
            }
        }
    }
    Ok(out)
}

/// Equal-width histogram over `[lo, hi]`; the top edge belongs to the last bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub lo: f64,
    pub hi: f64,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>, lo: f64, hi: f64) -> Result<Self> {
        ensure!(!counts.is_empty(), Parameter, "histogram needs at least one bin");
        ensure!(lo.is_finite() && hi.is_finite() && hi > lo, Parameter, "invalid histogram range [{lo}, {hi}]");
        Ok(Self { counts, lo, hi })
    }

    /// Bins the finite values over their observed range. A constant input
    /// gets the range `[v, v + 1]`.
    pub fn build<I: IntoIterator<Item = f64>>(values: I, bins: usize) -> Result<Self> {
        ensure!(bins >= 1, Parameter, "histogram needs at least one bin");
        let values: Vec<f64> = values.into_iter().collect();
        ensure!(!values.is_empty(), Input, "cannot build a histogram of no values");
        ensure!(values.iter().all(|v| v.is_finite()), Input, "histogram input contains NaN or infinite values");
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let mut h = Self { counts: vec![0; bins], lo, hi };
        for v in values {
            let b = h.bin_of(v);
            h.counts[b] += 1;
        }
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    pub fn center(&self, b: usize) -> f64 {
        self.lo + (b as f64 + 0.5) * self.width()
    }

    /// Boundary `k`, the lower edge of bin `k`.
    pub fn edge(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.width()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let b = ((v - self.lo) / self.width()).floor();
        if b <= 0.0 {
            0
        } else {
            (b as usize).min(self.bins() - 1)
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    pub value: f64,
    /// Rosin: the selected bin. Otsu: the selected boundary index.
    pub index: usize,
    /// Set when the Rosin line is undefined (peak is the last non-empty bin).
    pub degenerate: bool,
}

pub fn rosin_threshold(hist: &Histogram) -> Result<Threshold> {
    let c = &hist.counts;
    ensure!(c.len() >= 3, Parameter, "Rosin thresholding needs at least 3 bins, got {}", c.len());
    ensure!(hist.total() > 0, Input, "histogram is empty");
    let max = *c.iter().max().expect("non-empty");
    let peak = c.iter().position(|&v| v == max).expect("max exists");
    let tail = c.iter().rposition(|&v| v > 0).expect("non-empty");
    if tail <= peak {
        log::warn!("degenerate histogram: peak bin {peak} is the last non-empty bin; using its upper edge");
        return Ok(Threshold { value: hist.edge(peak + 1), index: peak, degenerate: true });
    }
    let dx = (tail - peak) as i128;
    let dy = c[tail] as i128 - c[peak] as i128;
    let mut best = (0i128, peak);
    for (b, &cb) in c.iter().enumerate().take(tail + 1).skip(peak) {
        // |cross| is the distance times the fixed line length.
        let cross = (dx * (cb as i128 - c[peak] as i128) - dy * (b - peak) as i128).abs();
        if cross >= best.0 {
            best = (cross, b);
        }
    }
    Ok(Threshold { value: hist.center(best.1), index: best.1, degenerate: false })
}

pub fn otsu_threshold(hist: &Histogram) -> Result<Threshold> {
    let c = &hist.counts;
    ensure!(c.iter().filter(|&&v| v > 0).count() >= 2, Input, "Otsu thresholding needs at least two non-empty bins");
    let n: u128 = c.iter().map(|&v| v as u128).sum();
    let s: u128 = c.iter().enumerate().map(|(b, &v)| b as u128 * v as u128).sum();
    // Between-class variance at boundary k is proportional to
    // (S0*W1 - S1*W0)^2 / (W0*W1) with bin indices as positions.
    let mut best: Option<(BigUint, BigUint)> = None;
    let mut ties = Vec::new();
    let (mut w0, mut s0) = (0u128, 0u128);
    for k in 1..c.len() {
        w0 += c[k - 1] as u128;
        s0 += (k as u128 - 1) * c[k - 1] as u128;
        let (w1, s1) = (n - w0, s - s0);
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let diff = BigUint::from((s0 * w1).abs_diff(s1 * w0));
        let num = &diff * &diff;
        let den = BigUint::from(w0) * BigUint::from(w1);
        let ord = match &best {
            None => std::cmp::Ordering::Greater,
            Some((bn, bd)) => (&num * bd).cmp(&(bn * &den)),
        };
        match ord {
            std::cmp::Ordering::Greater => {
                best = Some((num, den));
                ties.clear();
                ties.push(k);
            }
            std::cmp::Ordering::Equal => ties.push(k),
            std::cmp::Ordering::Less => {}
        }
    }
    let k = ties[(ties.len() - 1) / 2];
    Ok(Threshold { value: hist.edge(k), index: k, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    Rosin,
    Otsu,
    Fixed(f64),
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rosin => write!(f, "rosin"),
            Self::Otsu => write!(f, "otsu"),
            Self::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

/// Accepts `rosin`, `otsu`, `fixed:<t>` or a bare number.
impl FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "rosin" => Ok(Self::Rosin),
            "otsu" => Ok(Self::Otsu),
            other => other
                .strip_prefix("fixed:")
                .unwrap_or(other)
                .parse::<f64>()
                .ok()
                .filter(|t| t.is_finite())
                .map(Self::Fixed)
                .ok_or_else(|| Error::Config(format!("unknown threshold method {s:?}"))),
        }
    }
}

pub fn binarize(scores: &Array2<f64>, threshold: f64) -> Array2<bool> {
    scores.mapv(|v| v > threshold)
}

/// Attenuates intensity where the log-variance exceeds its own Rosin
/// threshold. Returns the gated map and that threshold.
pub fn gate_intensity(intensity: &Array2<f64>, logvar: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    ensure!(intensity.dim() == logvar.dim(), Shape, "log-variance {:?} does not match intensity {:?}", logvar.dim(), intensity.dim());
    let hist = Histogram::build(logvar.iter().copied(), DEFAULT_BINS)?;
    let s_thresh = rosin_threshold(&hist)?.value;
    let mut gated = intensity.clone();
    Zip::from(&mut gated).and(logvar).for_each(|g, &s| {
        if s > s_thresh {
            *g *= (-(s - s_thresh)).exp();
        }
    });
    Ok((gated, s_thresh))
}

#[derive(Debug, Clone)]
pub struct ChangeProduct {
    pub intensity: Array2<f64>,
    /// Gated intensity, present when uncertainty gating ran.
    pub gated: Option<Array2<f64>>,
    pub logvar: Option<Array2<f64>>,
    pub logvar_threshold: Option<f64>,
    pub method: ThresholdMethod,
    pub threshold: f64,
    pub degenerate: bool,
    /// Histogram of the thresholded scores (gated if gating ran).
    pub histogram: Histogram,
    pub binary: Array2<bool>,
}

impl ChangeProduct {
    /// The map that was thresholded.
    pub fn scores(&self) -> &Array2<f64> {
        self.gated.as_ref().unwrap_or(&self.intensity)
    }

    pub fn changed_fraction(&self) -> f64 {
        self.binary.iter().filter(|&&v| v).count() as f64 / self.binary.len() as f64
    }

    /// Plain-text sidecar describing how the binary map was produced.
    pub fn report(&self) -> String {
        let s = self.scores();
        let mean = s.mean().unwrap_or(0.0);
        let mut out = String::new();
        out.push_str(&format!("method: {}\n", self.method));
        out.push_str(&format!("threshold: {:.6}\n", self.threshold));
        out.push_str(&format!("degenerate_histogram: {}\n", self.degenerate));
        out.push_str(&format!("size: {}x{}\n", s.nrows(), s.ncols()));
        out.push_str(&format!("changed_fraction: {:.6}\n", self.changed_fraction()));
        out.push_str(&format!("score_mean: {mean:.6}\n"));
        out.push_str(&format!(
            "histogram: bins={} range=[{:.6}, {:.6}] peak_bin={}\n",
            self.histogram.bins(),
            self.histogram.lo,
            self.histogram.hi,
            self.histogram.counts.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).map_or(0, |p| p.0)
        ));
        let coarse: Vec<String> = self
            .histogram
            .counts
            .chunks(self.histogram.bins().div_ceil(16).max(1))
            .map(|ch| ch.iter().sum::<u64>().to_string())
            .collect();
        out.push_str(&format!("histogram_coarse: {}\n", coarse.join(" ")));
        match (self.logvar.as_ref(), self.logvar_threshold) {
            (Some(lv), Some(t)) => {
                let gated = lv.iter().filter(|&&v| v > t).count();
                out.push_str(&format!("gating: on logvar_threshold={t:.6} gated_pixels={gated}\n"));
            }
            (Some(_), None) => out.push_str("gating: off (logvar attached)\n"),
            _ => out.push_str("gating: off\n"),
        }
        out
    }
}

/// Thresholds an intensity map. With `logvar` and `gating`, thresholds the
/// gated map instead.
pub fn change_product(
    intensity: Array2<f64>,
    logvar: Option<Array2<f64>>,
    method: ThresholdMethod,
    gating: bool,
) -> Result<ChangeProduct> {
    ensure!(!intensity.is_empty(), Input, "empty intensity map");
    let (gated, logvar_threshold) = match (&logvar, gating) {
        (Some(lv), true) => {
            let (g, t) = gate_intensity(&intensity, lv)?;
            (Some(g), Some(t))
        }
        (None, true) => return Err(Error::Config("uncertainty gating requires a log-variance map".into())),
        _ => (None, None),
    };
    let scores = gated.as_ref().unwrap_or(&intensity);
    let histogram = Histogram::build(scores.iter().copied(), DEFAULT_BINS)?;
    let (threshold, degenerate) = match method {
        ThresholdMethod::Rosin => {
            let t = rosin_threshold(&histogram)?;
            (t.value, t.degenerate)
        }
        ThresholdMethod::Otsu => (otsu_threshold(&histogram)?.value, false),
        ThresholdMethod::Fixed(t) => (t, false),
    };
    let binary = binarize(scores, threshold);
    Ok(ChangeProduct { intensity, gated, logvar, logvar_threshold, method, threshold, degenerate, histogram, binary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(v: Vec<f64>, d: usize) -> FeatureMap<f64> {
        let n = v.len() / d;
        FeatureMap::new(Array4::from_shape_vec((1, d, 1, n), v).unwrap())
    }

    #[test]
    fn intensity_endpoints() {
        let a = fm(vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0], 2);
        let same = intensity(&a, &a).unwrap();
        assert!(same.iter().all(|&v| v.abs() < 1e-12));
        let orth = fm(vec![0.0, -1.0, 0.0, 1.0, 0.0, 0.0], 2);
        let i = intensity(&a, &orth).unwrap();
        assert!((i[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((i[[0, 0, 1]] - 2.0).abs() < 1e-12);
        assert_eq!(i[[0, 0, 2]], 1.0, "zero vector scores 1");
        let wrong = fm(vec![0.0; 4], 2);
        assert!(matches!(intensity(&a, &wrong), Err(Error::Shape(_))));
    }

    fn hist(counts: &[u64]) -> Histogram {
        Histogram::from_counts(counts.to_vec(), 0.0, 1.0).unwrap()
    }

    #[test]
    fn rosin_matches_oracle_on_decay_examples() {
        let h = hist(&[100, 50, 25, 12, 6, 3, 1, 0, 0, 1]);
        let t = rosin_threshold(&h).unwrap();
        assert_eq!(Some(t.index), oracle::rosin_bin(&h.counts));
        assert_eq!(t.value, h.center(t.index));
        let geo: Vec<u64> = (0..16).map(|b| (1000.0 * 2f64.powi(-b)).floor() as u64).collect();
        let h = hist(&geo);
        assert_eq!(Some(rosin_threshold(&h).unwrap().index), oracle::rosin_bin(&geo));
    }

    #[test]
    fn rosin_degenerate_paths() {
        let h = hist(&[1, 2, 3, 4, 5]);
        let t = rosin_threshold(&h).unwrap();
        assert!(t.degenerate);
        assert_eq!((t.index, t.value), (4, 1.0));
        let h = hist(&[0, 7, 0, 0]);
        let t = rosin_threshold(&h).unwrap();
        assert!(t.degenerate);
        assert!((t.value - 0.5).abs() < 1e-15);
        assert!(rosin_threshold(&hist(&[0, 0, 0])).is_err());
        assert!(rosin_threshold(&hist(&[1, 1])).is_err());
    }

    #[test]
    fn otsu_examples() {
        // Bins centred at 0.2, 0.4, 0.6, 0.8; the tied boundaries are 0.3, 0.5, 0.7.
        let h = Histogram::from_counts(vec![10, 0, 0, 10], 0.1, 0.9).unwrap();
        let t = otsu_threshold(&h).unwrap();
        assert_eq!(t.index, 2);
        assert!((t.value - 0.5).abs() < 1e-12);
        assert_eq!(Some(t.index), oracle::otsu_boundary(&h.counts));
        let uniform = hist(&[5; 9]);
        let t = otsu_threshold(&uniform).unwrap();
        assert_eq!(t.index, 4, "tie between 4 and 5 goes low");
        assert_eq!(Some(t.index), oracle::otsu_boundary(&uniform.counts));
        let even = hist(&[5; 8]);
        assert_eq!(otsu_threshold(&even).unwrap().index, 4);
        assert!(matches!(otsu_threshold(&hist(&[0, 9, 0])), Err(Error::Input(_))));
    }

    fn random_counts(rng: &mut ChaCha8Rng) -> Vec<u64> {
        let bins = rng.random_range(3..=64);
        let style = rng.random_range(0..4);
        let mut c: Vec<u64> = (0..bins)
            .map(|b| match style {
                0 => rng.random_range(0..50),
                1 => (5000.0 * (-(b as f64) / rng.random_range(1.0..8.0)).exp()) as u64 + rng.random_range(0..3),
                2 => {
                    if rng.random_bool(0.6) {
                        0
                    } else {
                        rng.random_range(1..1_000_000)
                    }
                }
                _ => rng.random_range(0..4),
            })
            .collect();
        // Keep at least two non-empty bins so both methods are defined.
        let len = c.len();
        c[0] += 1;
        c[len - 1] += 1;
        c
    }

    #[test]
    fn thresholds_match_exhaustive_oracles_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let c = random_counts(&mut rng);
            let h = hist(&c);
            let r = rosin_threshold(&h).unwrap();
            match oracle::rosin_bin(&c) {
                Some(b) => assert_eq!((r.index, r.degenerate), (b, false), "{c:?}"),
                None => assert!(r.degenerate, "{c:?}"),
            }
            let o = otsu_threshold(&h).unwrap();
            assert_eq!(Some(o.index), oracle::otsu_boundary(&c), "{c:?}");
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("Rosin".parse::<ThresholdMethod>().unwrap(), ThresholdMethod::Rosin);
        assert_eq!("otsu".parse::<ThresholdMethod>().unwrap(), ThresholdMethod::Otsu);
        assert_eq!("fixed:0.3".parse::<ThresholdMethod>().unwrap(), ThresholdMethod::Fixed(0.3));
        assert_eq!("2.1".parse::<ThresholdMethod>().unwrap(), ThresholdMethod::Fixed(2.1));
        assert!("kmeans".parse::<ThresholdMethod>().is_err());
    }

    #[test]
    fn product_with_fixed_threshold_above_range_is_empty() {
        let i = Array2::from_shape_fn((8, 8), |(a, b)| (a * b) as f64 / 32.0);
        let p = change_product(i, None, ThresholdMethod::Fixed(2.1), false).unwrap();
        assert!(p.binary.iter().all(|&v| !v));
        assert!(p.report().contains("method: fixed:2.1"));
    }

    #[test]
    fn constant_zero_intensity_gives_empty_map() {
        let p = change_product(Array2::zeros((8, 8)), None, ThresholdMethod::Rosin, false).unwrap();
        assert!(p.degenerate && p.threshold > 0.0);
        assert!(p.binary.iter().all(|&v| !v));
    }

    #[test]
    fn rosin_separates_a_planted_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let i = Array2::from_shape_fn((64, 64), |(r, c)| {
            if r < 8 && c < 32 {
                rng.random_range(0.7..1.0)
            } else {
                rng.random_range(0.0..0.3f64).powi(2)
            }
        });
        let p = change_product(i.clone(), None, ThresholdMethod::Rosin, false).unwrap();
        let truth = Array2::from_shape_fn((64, 64), |(r, c)| r < 8 && c < 32);
        let hits = Zip::from(&p.binary).and(&truth).fold(0, |n, &a, &b| n + usize::from(a == b));
        assert!(hits as f64 / 4096.0 > 0.95, "{hits}");
    }

    #[test]
    fn gating_attenuates_only_uncertain_pixels() {
        let i = Array2::from_elem((16, 16), 0.5);
        let lv = Array2::from_shape_fn((16, 16), |(r, _)| if r < 2 { 3.0 } else { -1.0 });
        let p = change_product(i.clone(), Some(lv.clone()), ThresholdMethod::Fixed(0.4), true).unwrap();
        let t = p.logvar_threshold.unwrap();
        assert!(t > -1.0 && t < 3.0);
        let g = p.gated.as_ref().unwrap();
        assert!((g[[0, 0]] - 0.5 * (-(3.0 - t)).exp()).abs() < 1e-12);
        assert_eq!(g[[5, 5]], 0.5);
        assert!(!p.binary[[0, 0]] && p.binary[[5, 5]]);
        assert!(p.report().contains("gating: on"));
        assert!(change_product(i, None, ThresholdMethod::Rosin, true).is_err());
    }

    proptest! {
        #[test]
        fn intensity_symmetric_and_bounded(v in proptest::collection::vec(-3.0f64..3.0, 24)) {
            let a = fm(v[..12].to_vec(), 3);
            let b = fm(v[12..].to_vec(), 3);
            let ab = intensity(&a, &b).unwrap();
            let ba = intensity(&b, &a).unwrap();
            prop_assert_eq!(&ab, &ba);
            prop_assert!(ab.iter().all(|&x| (0.0..=2.0).contains(&x)));
        }

        #[test]
        fn binarization_monotone_in_threshold(v in proptest::collection::vec(0.0f64..2.0, 16), t1 in 0.0f64..2.0, dt in 0.0f64..1.0) {
            let s = Array2::from_shape_vec((4, 4), v).unwrap();
            let lo = binarize(&s, t1);
            let hi = binarize(&s, t1 + dt);
            prop_assert!(Zip::from(&lo).and(&hi).all(|&a, &b| a || !b));
        }

        #[test]
        fn histogram_preserves_count(v in proptest::collection::vec(-5.0f64..5.0, 1..200), bins in 1usize..300) {
            let h = Histogram::build(v.iter().copied(), bins).unwrap();
            prop_assert_eq!(h.total(), v.len() as u64);
            for &x in &v {
                let b = h.bin_of(x);
                prop_assert!(x >= h.edge(b) - 1e-9 && (b + 1 == bins || x < h.edge(b + 1) + 1e-9));
            }
        }
    }
}
