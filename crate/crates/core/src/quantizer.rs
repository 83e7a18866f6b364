//! Gumbel-Softmax vector quantization with a straight-through gradient.
//!
//! Each pixel feature `z` (D channels) is mapped to `groups * N` logits by a
//! pointwise linear layer. Per group, the forward pass picks the codeword at
//! `argmax(logits + gumbel)` and the concatenated codewords go through a
//! linear output projection back to D channels. The backward pass treats the
//! one-hot selection as if it were the soft probabilities
//! `softmax((logits + gumbel) / tau)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::FeatureMap;
use crate::nn::{join, Conv2d, Mode, Parameterized};
use crate::Scalar;

/// Which Siamese branches pass through the quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizeBranches {
    #[default]
    Both,
    /// Only the first branch is quantized (heterogeneous sensor pairs).
    FirstOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub groups: usize,
    /// Linear annealing endpoints; equal values give a fixed temperature.
    pub tau_start: f64,
    pub tau_end: f64,
    pub branches: QuantizeBranches,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self { codebook_size: 1024, groups: 1, tau_start: 2.0, tau_end: 0.5, branches: QuantizeBranches::Both }
    }
}

impl QuantizerConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        ensure!(self.codebook_size >= 2, Config, "codebook_size must be >= 2");
        ensure!(self.groups >= 1, Config, "groups must be >= 1");
        ensure!(
            feature_dim.is_multiple_of(self.groups),
            Config,
            "feature_dim {feature_dim} not divisible by {} groups",
            self.groups
        );
        ensure!(self.tau_start > 0.0 && self.tau_end > 0.0, Config, "temperatures must be positive");
        Ok(())
    }

    /// Temperature at `step` of `total_steps`, linearly annealed.
    pub fn temperature(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.tau_start;
        }
        let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

/// Standard Gumbel sample `-ln(-ln u)`, `u ~ U(0, 1)`.
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T], tau: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise `softmax((logits + n) / tau)`; `n` is Gumbel noise seeded by
/// `seed` when `noise` is set, zero otherwise.
pub fn select_probs<T: Scalar>(logits: ArrayView2<'_, T>, tau: T, noise: bool, seed: u64) -> Result<Array2<T>> {
    ensure!(tau > T::zero(), Parameter, "temperature must be positive, got {tau}");
    ensure!(logits.iter().all(|v| v.is_finite()), Input, "logits must be finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        if noise {
            row.mapv_inplace(|v| v + T::lit(gumbel(&mut rng)));
        }
        let mut buf = row.to_vec();
        softmax_row(&mut buf, tau);
        row.assign(&Array1::from(buf));
    }
    Ok(out)
}

/// Mean of per-pixel probability rows (pixels x N).
pub fn usage_histogram<T: Scalar>(probs: ArrayView2<'_, T>) -> Result<Array1<T>> {
    ensure!(probs.nrows() > 0, Input, "usage histogram needs at least one pixel");
    Ok(probs.mean_axis(Axis(0)).expect("non-empty"))
}

/// `exp(H(p))` in nats; equals N for a uniform histogram.
pub fn perplexity<T: Scalar>(hist: &[T]) -> f64 {
    let h: f64 = hist
        .iter()
        .map(|&p| p.as_f64())
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

#[derive(Debug, Clone)]
pub struct Codebook<T> {
    /// (groups, N, D / groups)
    pub entries: Array3<T>,
    /// Pointwise D -> groups * N.
    pub logit_projection: Conv2d<T>,
    /// Pointwise D -> D applied to the concatenated codewords.
    pub output_projection: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct QuantizerOutput<T> {
    pub quantized: FeatureMap<T>,
    /// (B, groups * N, H, W) soft selection probabilities.
    pub probs: Array4<T>,
    /// (B, groups, H, W) selected codeword per group.
    pub hard_index: Array4<usize>,
    /// (groups, N) mean of `probs` over all pixels.
    pub usage: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct QuantizeCache<T> {
    z: Array4<T>,
    codewords: Array4<T>,
    tau: T,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(feature_dim: usize, cfg: &QuantizerConfig, seed: u64) -> Result<Self> {
        cfg.validate(feature_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_b00c);
        let g = cfg.groups;
        let e = feature_dim / g;
        let entries = Array3::from_shape_fn((g, cfg.codebook_size, e), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z)
        });
        let mut logit_projection = Conv2d::new(feature_dim, g * cfg.codebook_size, 1, 1, &mut rng);
        logit_projection.weight.mapv_inplace(|w| w * T::lit(0.5f64.sqrt()));
        let output_projection = Conv2d::new(feature_dim, feature_dim, 1, 1, &mut rng);
        Ok(Self { entries, logit_projection, output_projection })
    }

    pub fn groups(&self) -> usize {
        self.entries.dim().0
    }

    pub fn size(&self) -> usize {
        self.entries.dim().1
    }

    pub fn feature_dim(&self) -> usize {
        self.logit_projection.in_channels()
    }

    pub fn logits(&self, z: &Array4<T>) -> Result<Array4<T>> {
        ensure!(
            z.dim().1 == self.feature_dim(),
            Shape,
            "codebook expects {} channels, got {}",
            self.feature_dim(),
            z.dim().1
        );
        ensure!(z.iter().all(|v| v.is_finite()), Input, "features must be finite");
        Ok(self.logit_projection.forward(z).0)
    }

    /// Quantizes a feature grid. Training mode adds Gumbel noise drawn from `rng`;
    /// eval mode selects `argmax(logits)` deterministically.
    pub fn quantize<R: Rng>(
        &self,
        z: &FeatureMap<T>,
        mode: Mode,
        tau: T,
        rng: &mut R,
    ) -> Result<(QuantizerOutput<T>, QuantizeCache<T>)> {
        let logits = self.logits(&z.values)?;
        let noise = match mode {
            Mode::Train => Some(logits.mapv(|_| T::lit(gumbel(rng)))),
            Mode::Eval => None,
        };
        let (out, codewords) = self.select(&logits, noise.as_ref(), tau)?;
        Ok((out, QuantizeCache { z: z.values.clone(), codewords, tau }))
    }

    /// Hard selection and projection from precomputed logits.
    /// Returns the output and the gathered (pre-projection) codewords.
    pub fn select(
        &self,
        logits: &Array4<T>,
        noise: Option<&Array4<T>>,
        tau: T,
    ) -> Result<(QuantizerOutput<T>, Array4<T>)> {
        ensure!(tau > T::zero(), Parameter, "temperature must be positive, got {tau}");
        let (b, gn, h, w) = logits.dim();
        let (g, n, e) = self.entries.dim();
        ensure!(gn == g * n, Shape, "expected {} logits per pixel, got {gn}", g * n);
        let mut probs = logits.clone();
        if let Some(noise) = noise {
            ensure!(noise.dim() == logits.dim(), Shape, "noise shape mismatch");
            probs += noise;
        }
        let mut hard_index = Array4::<usize>::zeros((b, g, h, w));
        let mut codewords = Array4::<T>::zeros((b, g * e, h, w));
        let mut row = vec![T::zero(); n];
        for bi in 0..b {
            for gi in 0..g {
                for i in 0..h {
                    for j in 0..w {
                        let mut lane = probs.slice_mut(s![bi, gi * n..(gi + 1) * n, i, j]);
                        for (r, v) in row.iter_mut().zip(lane.iter()) {
                            *r = *v;
                        }
                        // First maximum wins ties.
                        let mut best = 0;
                        for k in 1..n {
                            if row[k] > row[best] {
                                best = k;
                            }
                        }
                        softmax_row(&mut row, tau);
                        for (v, r) in lane.iter_mut().zip(row.iter()) {
                            *v = *r;
                        }
                        hard_index[[bi, gi, i, j]] = best;
                        codewords
                            .slice_mut(s![bi, gi * e..(gi + 1) * e, i, j])
                            .assign(&self.entries.slice(s![gi, best, ..]));
                    }
                }
            }
        }
        let quantized = self.output_projection.forward(&codewords).0;
        let pixels = b * h * w;
        let usage = probs
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((g, n, pixels))
            .expect("contiguous")
            .mean_axis(Axis(2))
            .expect("non-empty");
        Ok((QuantizerOutput { quantized: FeatureMap::new(quantized), probs, hard_index, usage }, codewords))
    }

    /// Straight-through backward to the logits. `d_probs` is an optional extra
    /// per-entry gradient (groups * N) added at every pixel, e.g. from the
    /// codebook diversity loss.
    pub fn backward_to_logits(
        &self,
        out: &QuantizerOutput<T>,
        codewords: &Array4<T>,
        tau: T,
        dv: &Array4<T>,
        d_probs: Option<&Array1<T>>,
        grads: &mut Codebook<T>,
    ) -> Array4<T> {
        let (b, gn, h, w) = out.probs.dim();
        let (g, n, e) = self.entries.dim();
        let dq = self.output_projection.backward(codewords, dv, &mut grads.output_projection);
        let mut dlogits = Array4::<T>::zeros((b, gn, h, w));
        for bi in 0..b {
            for gi in 0..g {
                let dq_g = dq
                    .slice(s![bi, gi * e..(gi + 1) * e, .., ..])
                    .to_owned()
                    .into_shape_with_order((e, h * w))
                    .expect("contiguous");
                for i in 0..h {
                    for j in 0..w {
                        let idx = out.hard_index[[bi, gi, i, j]];
                        let mut row = grads.entries.slice_mut(s![gi, idx, ..]);
                        row += &dq_g.column(i * w + j);
                    }
                }
                // dy[k, p] = c_k . dq[:, p]
                let mut dy = Array2::<T>::zeros((n, h * w));
                general_mat_mul(T::one(), &self.entries.index_axis(Axis(0), gi), &dq_g, T::zero(), &mut dy);
                if let Some(extra) = d_probs {
                    let ex = extra.slice(s![gi * n..(gi + 1) * n]);
                    for (mut r, &x) in dy.outer_iter_mut().zip(ex.iter()) {
                        r.mapv_inplace(|v| v + x);
                    }
                }
                let y = out.probs.slice(s![bi, gi * n..(gi + 1) * n, .., ..]);
                let y = y.as_standard_layout();
                let y = y.view().into_shape_with_order((n, h * w)).expect("contiguous");
                let mut dl = dlogits.slice_mut(s![bi, gi * n..(gi + 1) * n, .., ..]);
                for p in 0..h * w {
                    let mut dot = T::zero();
                    for k in 0..n {
                        dot += y[[k, p]] * dy[[k, p]];
                    }
                    for k in 0..n {
                        dl[[k, p / w, p % w]] = y[[k, p]] * (dy[[k, p]] - dot) / tau;
                    }
                }
            }
        }
        dlogits
    }

    pub fn backward(
        &self,
        out: &QuantizerOutput<T>,
        cache: &QuantizeCache<T>,
        dv: &Array4<T>,
        d_probs: Option<&Array1<T>>,
        grads: &mut Codebook<T>,
    ) -> Array4<T> {
        let dl = self.backward_to_logits(out, &cache.codewords, cache.tau, dv, d_probs, grads);
        self.logit_projection.backward(&cache.z, &dl, &mut grads.logit_projection)
    }

    /// The set of possible quantized outputs: `output_projection` of every
    /// codeword combination (only enumerated for a single group).
    pub fn output_table(&self) -> Result<Array2<T>> {
        ensure!(self.groups() == 1, Config, "output table only defined for one group");
        let n = self.size();
        let e = self.entries.dim().2;
        let cw = self
            .entries
            .index_axis(Axis(0), 0)
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, e, n, 1))
            .map_err(|err| Error::Shape(err.to_string()))?;
        let projected = self.output_projection.forward(&cw).0;
        Ok(projected
            .into_shape_with_order((e, n))
            .map_err(|err| Error::Shape(err.to_string()))?
            .t()
            .to_owned())
    }
}

impl<T: Scalar> Parameterized<T> for Codebook<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        f(join(p, "entries"), self.entries.view().into_dyn());
        self.logit_projection.visit(&join(p, "logit_projection"), f);
        self.output_projection.visit(&join(p, "output_projection"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        f(join(p, "entries"), self.entries.view_mut().into_dyn());
        self.logit_projection.visit_mut(&join(p, "logit_projection"), f);
        self.output_projection.visit_mut(&join(p, "output_projection"), f);
    }
}

/// Diagnostic CSV of `usage`: `index,p` rows, with a leading `group`
/// column when there is more than one group.
pub fn usage_csv<T: Scalar>(usage: &Array2<T>) -> String {
    let grouped = usage.nrows() > 1;
    let mut out = String::from(if grouped { "group,index,p\n" } else { "index,p\n" });
    for (g, row) in usage.outer_iter().enumerate() {
        for (i, p) in row.iter().enumerate() {
            if grouped {
                out.push_str(&format!("{g},"));
            }
            out.push_str(&format!("{i},{}\n", p.as_f64()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like;
    use ndarray::array;

    fn small_codebook(d: usize, n: usize, seed: u64) -> Codebook<f64> {
        let cfg = QuantizerConfig { codebook_size: n, ..QuantizerConfig::default() };
        Codebook::new(d, &cfg, seed).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform_probs() {
        let l = Array2::from_elem((3, 5), 0.7f64);
        for tau in [0.1, 1.0, 4.0] {
            let p = select_probs(l.view(), tau, false, 0).unwrap();
            assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_reference_values() {
        let l = array![[2.0f64, 1.0, 0.0]];
        let p = select_probs(l.view(), 1.0, false, 0).unwrap();
        // exp(2), exp(1), exp(0) normalized.
        let z = 1f64.exp().powi(2) + 1f64.exp() + 1.0;
        let expected = [1f64.exp().powi(2) / z, 1f64.exp() / z, 1.0 / z];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[[0, 0]] - 0.6652).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.2447).abs() < 1e-4);
        assert!((p[[0, 2]] - 0.0900).abs() < 1e-4);
        let cold = select_probs(l.view(), 1e-3, false, 0).unwrap();
        assert!((cold[[0, 0]] - 1.0).abs() < 1e-12 && cold[[0, 1]] < 1e-12);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let l = array![[1.0f64, 0.0]];
        assert!(matches!(select_probs(l.view(), 0.0, false, 0), Err(Error::Parameter(_))));
        assert!(matches!(select_probs(l.view(), -1.0, true, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn usage_histogram_examples() {
        let h = usage_histogram(array![[0.5f64, 0.5]].view()).unwrap();
        assert_eq!(h, array![0.5, 0.5]);
        let h = usage_histogram(array![[1.0f64, 0.0], [0.0, 1.0]].view()).unwrap();
        assert_eq!(h, array![0.5, 0.5]);
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(usage_histogram(empty.view()), Err(Error::Input(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Array2::from_shape_fn((50, 7), |_| rng.random_range(-3.0..3.0f64));
        let p = select_probs(l.view(), 0.7, true, 9).unwrap();
        let h = usage_histogram(p.view()).unwrap();
        assert!((h.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eval_picks_argmax_codeword() {
        let cb = small_codebook(3, 3, 1);
        let logits = Array4::from_shape_vec((1, 3, 1, 1), vec![2.0, 1.0, 0.0]).unwrap();
        let (out, cw) = cb.select(&logits, None, 1.0).unwrap();
        assert_eq!(out.hard_index[[0, 0, 0, 0]], 0);
        let table = cb.output_table().unwrap();
        for d in 0..3 {
            assert!((out.quantized.values[[0, d, 0, 0]] - table[[0, d]]).abs() < 1e-12);
            assert_eq!(cw[[0, d, 0, 0]], cb.entries[[0, 0, d]]);
        }
    }

    #[test]
    fn seeded_training_quantization_repeats() {
        let cb = small_codebook(4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = FeatureMap::new(Array4::from_shape_fn((2, 4, 3, 3), |_| rng.random_range(-1.0..1.0)));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            cb.quantize(&z, Mode::Train, 1.0, &mut rng).unwrap().0
        };
        let (a, b) = (run(5), run(5));
        assert_eq!(a.hard_index, b.hard_index);
        assert_eq!(a.quantized.values, b.quantized.values);
        let e1 = cb.quantize(&z, Mode::Eval, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
        let e2 = cb.quantize(&z, Mode::Eval, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
        assert_eq!(e1.quantized.values, e2.quantized.values);
    }

    #[test]
    fn hard_index_is_argmax_of_noisy_logits_and_output_in_table() {
        let cb = small_codebook(4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Array4::from_shape_fn((1, 6, 2, 3), |_| rng.random_range(-2.0..2.0));
        let noise = logits.mapv(|_| gumbel(&mut rng));
        let (out, _) = cb.select(&logits, Some(&noise), 0.8).unwrap();
        let table = cb.output_table().unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let noisy: Vec<f64> = (0..6).map(|k| logits[[0, k, i, j]] + noise[[0, k, i, j]]).collect();
                let arg = (0..6).fold(0, |b, k| if noisy[k] > noisy[b] { k } else { b });
                assert_eq!(out.hard_index[[0, 0, i, j]], arg);
                let row = table.row(arg);
                for d in 0..4 {
                    assert!((out.quantized.values[[0, d, i, j]] - row[d]).abs() < 1e-12);
                }
            }
        }
        assert!((out.usage.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let cb = small_codebook(4, 6, 3);
        let z = FeatureMap::new(Array4::<f64>::zeros((1, 5, 2, 2)));
        let r = cb.quantize(&z, Mode::Eval, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn grouped_selection_is_independent_per_group() {
        let cfg = QuantizerConfig { codebook_size: 3, groups: 2, ..QuantizerConfig::default() };
        let cb = Codebook::<f64>::new(4, &cfg, 0).unwrap();
        let logits = Array4::from_shape_vec((1, 6, 1, 1), vec![0.0, 5.0, 1.0, 3.0, 0.0, 0.0]).unwrap();
        let (out, cw) = cb.select(&logits, None, 1.0).unwrap();
        assert_eq!(out.hard_index[[0, 0, 0, 0]], 1);
        assert_eq!(out.hard_index[[0, 1, 0, 0]], 0);
        assert_eq!(cw[[0, 0, 0, 0]], cb.entries[[0, 1, 0]]);
        assert_eq!(cw[[0, 3, 0, 0]], cb.entries[[1, 0, 1]]);
        assert_eq!(out.usage.dim(), (2, 3));
    }

    #[test]
    fn feature_gradient_matches_soft_path() {
        let cb = small_codebook(3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array4::from_shape_fn((1, 3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let noise = Array4::from_shape_fn((1, 4, 2, 2), |_| gumbel(&mut rng));
        let r = Array4::from_shape_fn((1, 3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let tau = 0.9;
        let logits = cb.logits(&z).unwrap();
        let (out, cw) = cb.select(&logits, Some(&noise), tau).unwrap();
        let mut g = zeros_like(&cb);
        let dl = cb.backward_to_logits(&out, &cw, tau, &r, None, &mut g);
        let dz = cb.logit_projection.backward(&z, &dl, &mut g.logit_projection);
        let soft = |z: &Array4<f64>| {
            let l = cb.logits(z).unwrap() + &noise;
            let mut q = Array4::<f64>::zeros((1, 3, 2, 2));
            for i in 0..2 {
                for j in 0..2 {
                    let mut row: Vec<f64> = (0..4).map(|k| l[[0, k, i, j]]).collect();
                    softmax_row(&mut row, tau);
                    for d in 0..3 {
                        q[[0, d, i, j]] = (0..4).map(|k| row[k] * cb.entries[[0, k, d]]).sum();
                    }
                }
            }
            (&cb.output_projection.forward(&q).0 * &r).sum()
        };
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 2, 1, 1], [0, 1, 0, 1]] {
            let mut zp = z.clone();
            zp[idx] += eps;
            let mut zm = z.clone();
            zm[idx] -= eps;
            let fd = (soft(&zp) - soft(&zm)) / (2.0 * eps);
            assert!((fd - dz[idx]).abs() <= 1e-3 * fd.abs().max(1e-6), "{fd} vs {}", dz[idx]);
        }
    }

    #[test]
    fn temperature_schedule_is_linear() {
        let cfg = QuantizerConfig::default();
        assert_eq!(cfg.temperature(0, 11), 2.0);
        assert!((cfg.temperature(5, 11) - 1.25).abs() < 1e-12);
        assert!((cfg.temperature(10, 11) - 0.5).abs() < 1e-12);
        assert_eq!(cfg.temperature(3, 1), 2.0);
        let fixed = QuantizerConfig { tau_start: 1.0, tau_end: 1.0, ..cfg };
        assert_eq!(fixed.temperature(7, 10), 1.0);
    }

    #[test]
    fn gumbel_samples_match_reference_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs: Vec<f64> = (0..100_000).map(|_| gumbel(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (-(-x).exp()).exp();
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn usage_csv_layout() {
        let csv = usage_csv(&array![[0.25f64, 0.75]]);
        assert_eq!(csv, "index,p\n0,0.25\n1,0.75\n");
        let csv = usage_csv(&array![[1.0f64], [1.0]]);
        assert!(csv.starts_with("group,index,p\n0,0,1\n1,0,1"));
    }

    #[test]
    fn codeword_and_extra_prob_gradients() {
        let cb = small_codebook(2, 3, 4);
        let logits = Array4::from_shape_vec((1, 3, 1, 1), vec![0.3, 0.1, -0.2]).unwrap();
        let (out, cw) = cb.select(&logits, None, 1.0).unwrap();
        let dv = Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, -2.0]).unwrap();
        let mut g = zeros_like(&cb);
        let extra = array![1.0, 0.0, 0.0];
        let dl = cb.backward_to_logits(&out, &cw, 1.0, &dv, Some(&extra), &mut g);
        // Straight-through codeword gradient lands only on the selected row.
        let w = &cb.output_projection.weight;
        for d in 0..2 {
            let expected = (0..2).map(|o| w[[o, d, 0, 0]] * dv[[0, o, 0, 0]]).sum::<f64>();
            assert!((g.entries[[0, 0, d]] - expected).abs() < 1e-12);
            assert_eq!(g.entries[[0, 1, d]], 0.0);
        }
        // Softmax Jacobian rows sum to zero.
        assert!(dl.sum().abs() < 1e-12);
    }

    #[test]
    fn perplexity_of_uniform_is_size() {
        assert!((perplexity(&[0.25f64; 4]) - 4.0).abs() < 1e-12);
        assert!((perplexity(&[1.0f64, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }
}
