//! Oracle suites shared by the `selftest` command and the acceptance tests.
//!
//! Each suite returns a [`Check`] rather than panicking so callers can print
//! a full report.

use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::changemap::{otsu_threshold, rosin_threshold, Histogram};
use crate::data::RasterImage;
use crate::losses::{codebook_loss, contrastive_loss, distill_total, uncertainty_loss, ContrastiveBatch};
use crate::metrics::{confusion, scores, Confusion};
use crate::model::FeatureMap;
use crate::nn::{zeros_like, Mode};
use crate::quantizer::{gumbel, Codebook, QuantizerConfig};
use crate::sampling::{felzenszwalb_segment, SegmentParams};
use crate::views::{align_overlap, Flip, PairGeometry};
use crate::{oracle, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}: {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Relative gradient tolerance of the finite-difference suites.
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-4)
}

fn unit_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
    let mut x = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0f64));
    for mut r in x.outer_iter_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    x
}

/// Central differences over every input entry of `f`, against `analytic`.
fn probe_all<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    analytic: &ndarray::Array<f64, D>,
    f: &dyn Fn(&ndarray::Array<f64, D>) -> Result<f64>,
) -> Result<(f64, usize)> {
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (k, &g) in analytic.iter().enumerate() {
        let mut p = x.clone();
        let mut m = x.clone();
        *p.iter_mut().nth(k).expect("index in range") += eps;
        *m.iter_mut().nth(k).expect("index in range") -= eps;
        let fd = (f(&p)? - f(&m)?) / (2.0 * eps);
        worst = worst.max(rel_err(g, fd));
    }
    Ok((worst, analytic.len()))
}

/// Contrastive (M=3, K=5, D=4), codebook, uncertainty and distillation loss
/// gradients against central differences.
pub fn loss_gradients() -> Check {
    timed("loss gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let base = ContrastiveBatch {
            anchors: unit_rows(&mut rng, 3, 4),
            positives: unit_rows(&mut rng, 3, 4),
            negatives: unit_rows(&mut rng, 5, 4),
            negative_index: None,
            temperature: 0.2,
        };
        let (_, g) = contrastive_loss(&base)?;
        let mut report = Vec::new();
        let mut worst = 0.0f64;
        let mut total = 0;
        let mut add = |name: &str, (w, n): (f64, usize)| {
            report.push(format!("{name} {w:.1e}"));
            worst = worst.max(w);
            total += n;
        };
        add("contrastive/anchors", probe_all(&base.anchors, &g.anchors, &|x| {
            contrastive_loss(&ContrastiveBatch { anchors: x.clone(), ..base.clone() }).map(|r| r.0)
        })?);
        add("contrastive/positives", probe_all(&base.positives, &g.positives, &|x| {
            contrastive_loss(&ContrastiveBatch { positives: x.clone(), ..base.clone() }).map(|r| r.0)
        })?);
        add("contrastive/negatives", probe_all(&base.negatives, &g.negatives, &|x| {
            contrastive_loss(&ContrastiveBatch { negatives: x.clone(), ..base.clone() }).map(|r| r.0)
        })?);

        let mut p = Array1::from_shape_fn(8, |_| rng.random_range(0.05..1.0f64));
        p /= p.sum();
        let (_, gp) = codebook_loss(p.view())?;
        add("codebook", probe_all(&p, &gp, &|x| codebook_loss(x.view()).map(|r| r.0))?);

        let grid = |rng: &mut ChaCha8Rng| Array4::from_shape_fn((1, 4, 3, 3), |_| rng.random_range(-1.0..1.0f64));
        let (y, mu) = (grid(&mut rng), grid(&mut rng));
        let sv = Array3::from_shape_fn((1, 3, 3), |_| rng.random_range(-1.0..1.0f64));
        let (_, gu) = uncertainty_loss(&y, &mu, &sv)?;
        add("uncertainty/mu", probe_all(&mu, &gu.mu, &|x| uncertainty_loss(&y, x, &sv).map(|r| r.0))?);
        add("uncertainty/s", probe_all(&sv, &gu.s, &|x| uncertainty_loss(&y, &mu, x).map(|r| r.0))?);

        let (yc, mc, ys, ms) = (grid(&mut rng), grid(&mut rng), grid(&mut rng), grid(&mut rng));
        let lam = 0.7;
        let (_, gd) = distill_total(&yc, &mc, &sv, &ys, &ms, lam)?;
        let dt = |a: &Array4<f64>, b: &Array4<f64>, s: &Array3<f64>, c: &Array4<f64>, d: &Array4<f64>| {
            distill_total(a, b, s, c, d, lam).map(|r| r.0.total)
        };
        add("distill/y_cross", probe_all(&yc, &gd.y_cross, &|x| dt(x, &mc, &sv, &ys, &ms))?);
        add("distill/mu_cross", probe_all(&mc, &gd.mu_cross, &|x| dt(&yc, x, &sv, &ys, &ms))?);
        add("distill/s", probe_all(&sv, &gd.s, &|x| dt(&yc, &mc, x, &ys, &ms))?);
        add("distill/y_same", probe_all(&ys, &gd.y_same, &|x| dt(&yc, &mc, &sv, x, &ms))?);
        add("distill/mu_same", probe_all(&ms, &gd.mu_same, &|x| dt(&yc, &mc, &sv, &ys, x))?);
        Ok((worst <= GRADIENT_TOLERANCE, format!("max rel err {worst:.2e} over {total} probes [{}]", report.join(", "))))
    })
}

/// Closed-form values of the three losses on canonical fixtures.
pub fn closed_form_losses() -> Check {
    timed("closed-form losses", || {
        let e1 = ndarray::array![[1.0f64, 0.0]];
        let e2 = ndarray::array![[0.0f64, 1.0]];
        let b = ContrastiveBatch { anchors: e1.clone(), positives: e1.clone(), negatives: e2, negative_index: None, temperature: 1.0 };
        let c = contrastive_loss(&b)?.0;
        let c_want = (1.0 + (-1f64).exp()).ln();
        let v = 1024;
        let cb = codebook_loss(Array1::from_elem(v, 1.0 / v as f64).view())?.0;
        let cb_want = -(v as f64).ln() / v as f64;
        let mut a = Array4::<f64>::zeros((1, 2, 1, 1));
        a[[0, 0, 0, 0]] = 1.0;
        let mut o = Array4::<f64>::zeros((1, 2, 1, 1));
        o[[0, 1, 0, 0]] = 1.0;
        let u = uncertainty_loss(&a, &o, &Array3::zeros((1, 1, 1)))?.0;
        let ok = (c - c_want).abs() <= 1e-6 && (cb - cb_want).abs() <= 1e-9 && (u - 0.5).abs() <= 1e-9;
        Ok((ok, format!("contrastive {c:.9} (want {c_want:.9}), codebook {cb:.12} (want {cb_want:.12}), uncertainty {u:.12} (want 0.5)")))
    })
}

/// Random histogram of 3..=64 bins in one of four shapes.
pub fn random_histogram(rng: &mut ChaCha8Rng) -> Vec<u64> {
    let bins = rng.random_range(3..=64usize);
    let style = rng.random_range(0..4);
    let peak = rng.random_range(0..bins);
    let mut c: Vec<u64> = (0..bins)
        .map(|b| match style {
            0 => rng.random_range(0..50),
            1 => (1000.0 * (-0.3 * b as f64).exp()) as u64 + rng.random_range(0..3),
            2 => {
                let d = (b as f64 - peak as f64).abs();
                (500.0 / (1.0 + d * d)) as u64 + u64::from(rng.random_bool(0.2))
            }
            _ => {
                if rng.random_bool(0.3) {
                    rng.random_range(0..20)
                } else {
                    0
                }
            }
        })
        .collect();
    if c.iter().filter(|&&v| v > 0).count() < 2 {
        c[0] += 1;
        c[bins - 1] += 1;
    }
    c
}

/// Rosin and Otsu against the exact exhaustive scans on `n` random histograms each.
pub fn threshold_oracles(n: usize, seed: u64) -> Check {
    timed("threshold oracles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut rosin_bad, mut otsu_bad) = (0, 0);
        for _ in 0..n {
            let c = random_histogram(&mut rng);
            let h = Histogram::from_counts(c.clone(), 0.0, 1.0)?;
            let r = rosin_threshold(&h)?;
            let rosin_ok = match oracle::rosin_bin(&c) {
                Some(b) => r.index == b && !r.degenerate && r.value == h.center(b),
                None => r.degenerate,
            };
            rosin_bad += usize::from(!rosin_ok);
            let o = otsu_threshold(&h)?;
            let otsu_ok = oracle::otsu_boundary(&c).is_some_and(|k| o.index == k && o.value == h.edge(k));
            otsu_bad += usize::from(!otsu_ok);
        }
        Ok((rosin_bad == 0 && otsu_bad == 0, format!("{n} histograms; rosin mismatches {rosin_bad}, otsu mismatches {otsu_bad}")))
    })
}

/// Scores against per-pixel counting and the rational kappa oracle on `n`
/// random grids, plus the worked confusion fixture.
pub fn metric_oracle(n: usize, seed: u64) -> Check {
    timed("metric oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..n {
            let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
            let (pp, pt) = (rng.random::<f64>(), rng.random::<f64>());
            let pred = Array2::from_shape_fn((h, w), |_| rng.random_bool(pp));
            let truth = Array2::from_shape_fn((h, w), |_| rng.random_bool(pt));
            let got = scores(&confusion(pred.view(), truth.view(), None)?)?;
            let (p, t): (Vec<bool>, Vec<bool>) = (pred.iter().copied().collect(), truth.iter().copied().collect());
            let count = |a: bool, b: bool| p.iter().zip(&t).filter(|(x, y)| **x == a && **y == b).count() as f64;
            let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
            let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
            let pre = ratio(tp, tp + fp);
            let rec = ratio(tp, tp + fn_);
            let f1 = ratio(2.0 * pre * rec, pre + rec);
            let oa = (tp + tn) / p.len() as f64;
            let kappa = oracle::kappa_from_labels(&p, &t);
            for (a, b) in [(got.precision, pre), (got.recall, rec), (got.f1, f1), (got.overall_accuracy, oa), (got.kappa, kappa)] {
                worst = worst.max((a - b).abs());
            }
        }
        let fixture = scores(&Confusion { tp: 50, fp: 10, fn_: 20, tn: 920 })?;
        let ok = worst <= 1e-12 && (fixture.kappa - 0.7533).abs() <= 1e-4;
        Ok((ok, format!("{n} grids, max abs diff {worst:.1e}; fixture kappa {:.4}", fixture.kappa)))
    })
}

/// Overlap alignment of an identity feature grid under every flip pair and
/// 25 offsets, plus repeated-segmentation stability.
pub fn equivariance() -> Check {
    timed("equivariance", || {
        let (h, w) = (24, 24);
        let img = RasterImage::new(Array3::from_shape_fn((2, h, w), |(c, i, j)| (c * 1000 + i * w + j) as f64));
        let mut cases = 0;
        let mut bad = 0;
        for fa in Flip::ALL {
            for fb in Flip::ALL {
                for dy in -2isize..=2 {
                    for dx in -2isize..=2 {
                        let g = PairGeometry { size: 6, offset: (dy, dx), flip_a: fa, flip_b: fb, crop_origin_a: (8, 8) };
                        let (ra, ca) = g.crop_origin_a;
                        let (rb, cb) = g.crop_origin_b();
                        let va = fa.apply(img.data.slice(s![.., ra..ra + 6, ca..ca + 6]));
                        let vb = fb.apply(img.data.slice(s![.., rb..rb + 6, cb..cb + 6]));
                        let (ga, gb) = align_overlap(va.view(), vb.view(), &g)?;
                        cases += 1;
                        bad += usize::from(ga != gb);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seg_img = Array3::from_shape_fn((3, 32, 32), |(c, i, j)| {
            ((i / 8 + j / 8) % 3) as f64 * (c + 1) as f64 + 0.05 * rng.random::<f64>()
        });
        let first = felzenszwalb_segment(seg_img.view(), &SegmentParams::default())?;
        let mut stable = true;
        for _ in 0..3 {
            stable &= felzenszwalb_segment(seg_img.view(), &SegmentParams::default())? == first;
        }
        Ok((bad == 0 && stable, format!("{cases} flip/offset cases, {bad} misaligned; segmentation stable: {stable}")))
    })
}

/// Eval determinism, straight-through gradient against the soft path, and a
/// Kolmogorov-Smirnov test of the Gumbel sampler.
pub fn quantizer_suite() -> Check {
    timed("quantizer", || {
        let cfg = QuantizerConfig { codebook_size: 4, ..QuantizerConfig::default() };
        let cb = Codebook::<f64>::new(3, &cfg, 6)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array4::from_shape_fn((1, 3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let zf = FeatureMap::new(z.clone());
        let e1 = cb.quantize(&zf, Mode::Eval, 1.0, &mut ChaCha8Rng::seed_from_u64(1))?.0;
        let e2 = cb.quantize(&zf, Mode::Eval, 1.0, &mut ChaCha8Rng::seed_from_u64(2))?.0;
        let deterministic = e1.quantized.values == e2.quantized.values && e1.hard_index == e2.hard_index;

        let noise = Array4::from_shape_fn((1, 4, 2, 2), |_| gumbel(&mut rng));
        let r = Array4::from_shape_fn((1, 3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let tau = 0.9;
        let (out, cw) = cb.select(&cb.logits(&z)?, Some(&noise), tau)?;
        let mut g = zeros_like(&cb);
        let dl = cb.backward_to_logits(&out, &cw, tau, &r, None, &mut g);
        let dz = cb.logit_projection.backward(&z, &dl, &mut g.logit_projection);
        let soft = |z: &Array4<f64>| -> Result<f64> {
            let l = cb.logits(z)? + &noise;
            let mut q = Array4::<f64>::zeros((1, 3, 2, 2));
            for i in 0..2 {
                for j in 0..2 {
                    let row: Vec<f64> = (0..4).map(|k| (l[[0, k, i, j]] / tau).exp()).collect();
                    let sum: f64 = row.iter().sum();
                    for d in 0..3 {
                        q[[0, d, i, j]] = (0..4).map(|k| row[k] / sum * cb.entries[[0, k, d]]).sum();
                    }
                }
            }
            Ok((&cb.output_projection.forward(&q).0 * &r).sum())
        };
        let (st_err, _) = probe_all(&z, &dz, &soft)?;

        let mut xs: Vec<f64> = (0..100_000).map(|_| gumbel(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
            let f = (-(-x).exp()).exp();
            m.max((f - i as f64 / n).abs()).max((f - (i + 1) as f64 / n).abs())
        });
        let ok = deterministic && st_err <= GRADIENT_TOLERANCE && ks < 0.02;
        Ok((ok, format!("eval deterministic: {deterministic}; straight-through rel err {st_err:.2e}; Gumbel KS {ks:.4}")))
    })
}

pub fn run_all() -> Vec<Check> {
    vec![
        loss_gradients(),
        closed_form_losses(),
        threshold_oracles(1000, 2024),
        metric_oracle(500, 7),
        equivariance(),
        quantizer_suite(),
    ]
}
