//! Siamese ResUnet backbone.
//!
//! Topology (stride 1 and same padding everywhere unless noted):
//!
//! ```text
//! stem   : Conv3x3 -> BN -> ReLU -> MaxPool2            H/2
//! enc1   : ResidualUnit(stem -> c1, stride 1)           H/2
//! enc2   : ResidualUnit(c1 -> c2, stride 2)             H/4
//! enc3   : ResidualUnit(c2 -> c3, stride 2)             H/8
//! dec1   : [Conv-BN-ReLU]x2 (c3 -> c3), concat enc3, up  H/4
//! dec2   : [Conv-BN-ReLU]x2 (2c3 -> c2), concat enc2, up H/2
//! dec3   : [Conv-BN-ReLU]x2 (2c2 -> c1), concat enc1, up H
//! head   : Conv3x3-BN-ReLU (2c1 -> stem) -> Conv1x1 (stem -> D)
//! ```
//!
//! The three downsampling stages (pool plus two strided units) require input
//! height and width to be multiples of 8.

use ndarray::{Array4, ArrayViewD, ArrayViewMutD, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{
    concat_channels, concat_channels_backward, join, maxpool2, maxpool2_backward, relu,
    relu_backward, upsample2, upsample2_backward, BatchNorm2d, BnCache, Conv2d, Mode,
    Parameterized, PoolCache,
};
use crate::Scalar;

/// Total spatial downsampling factor of the encoder.
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub feature_dim: usize,
    pub stem_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_bands: 13,
            feature_dim: 128,
            stem_channels: 32,
            encoder_channels: vec![64, 128, 256],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_bands >= 1, Config, "in_bands must be >= 1, got {}", self.in_bands);
        ensure!(self.feature_dim >= 2, Config, "feature_dim must be >= 2, got {}", self.feature_dim);
        ensure!(self.stem_channels >= 1, Config, "stem_channels must be >= 1");
        ensure!(
            self.encoder_channels.len() == 3,
            Config,
            "encoder_channels needs exactly 3 entries, got {}",
            self.encoder_channels.len()
        );
        ensure!(
            self.encoder_channels.iter().all(|&c| c >= 1),
            Config,
            "encoder channel widths must be >= 1"
        );
        Ok(())
    }
}

/// Per-pixel feature grid of shape (batch, D, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Array4<T>,
    /// Set by [`normalize_pixels`]; true even if some pixels were zero vectors.
    pub normalized: bool,
    /// (batch, row, col) of zero pixel vectors left unnormalized.
    pub degenerate: Vec<(usize, usize, usize)>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Array4<T>) -> Self {
        Self { values, normalized: false, degenerate: Vec::new() }
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }
}

/// Below this norm a pixel vector is treated as exactly zero.
pub(crate) fn zero_norm<T: Scalar>() -> T {
    T::lit(1e-12)
}

/// Unit-L2-normalizes every pixel vector along the channel axis.
/// Zero vectors stay zero and are listed in `degenerate`.
pub fn normalize_pixels<T: Scalar>(f: &FeatureMap<T>) -> FeatureMap<T> {
    let (values, degenerate) = normalize_array(&f.values);
    FeatureMap { values, normalized: true, degenerate }
}

pub(crate) fn normalize_array<T: Scalar>(x: &Array4<T>) -> (Array4<T>, Vec<(usize, usize, usize)>) {
    let (n, _, h, w) = x.dim();
    let mut y = x.to_owned();
    let mut degenerate = Vec::new();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut v = y.slice_mut(ndarray::s![b, .., i, j]);
                let norm = v.iter().map(|&a| a * a).sum::<T>().sqrt();
                if norm < zero_norm() {
                    v.fill(T::zero());
                    degenerate.push((b, i, j));
                } else {
                    v.mapv_inplace(|a| a / norm);
                }
            }
        }
    }
    (y, degenerate)
}

/// Gradient of pixel normalization; `y` is the normalized output of `x`.
pub fn normalize_pixels_backward<T: Scalar>(x: &Array4<T>, y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let (n, _, h, w) = x.dim();
    let mut dx = Array4::<T>::zeros(x.dim());
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let xv = x.slice(ndarray::s![b, .., i, j]);
                let norm = xv.iter().map(|&a| a * a).sum::<T>().sqrt();
                if norm < zero_norm() {
                    continue;
                }
                let yv = y.slice(ndarray::s![b, .., i, j]);
                let gv = dy.slice(ndarray::s![b, .., i, j]);
                let proj = Zip::from(&yv).and(&gv).fold(T::zero(), |acc, &a, &g| acc + a * g);
                Zip::from(dx.slice_mut(ndarray::s![b, .., i, j]))
                    .and(&yv)
                    .and(&gv)
                    .for_each(|d, &a, &g| *d = (g - a * proj) / norm);
            }
        }
    }
    dx
}

/// Pre-activation residual unit: `relu(shortcut(x) + F(x))` with
/// `F = BN-ReLU-Conv(stride) -> BN-ReLU-Conv` and `shortcut = Conv1x1(stride)-BN`.
#[derive(Debug, Clone)]
pub struct ResidualUnit<T> {
    pub bn1: BatchNorm2d<T>,
    pub conv1: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut_conv: Conv2d<T>,
    pub shortcut_bn: BatchNorm2d<T>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    bn1: BnCache<T>,
    a1: Array4<T>,
    conv1_in: Array4<T>,
    bn2: BnCache<T>,
    a2: Array4<T>,
    conv2_in: Array4<T>,
    sc_in: Array4<T>,
    sc_bn: BnCache<T>,
    out: Array4<T>,
}

impl<T: Scalar> ResidualUnit<T> {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn1: BatchNorm2d::new(cin),
            conv1: Conv2d::new(cin, cout, 3, stride, rng),
            bn2: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, rng),
            shortcut_conv: Conv2d::new(cin, cout, 1, stride, rng),
            shortcut_bn: BatchNorm2d::new(cout),
        }
    }

    /// Residual branch F only.
    pub fn residual(&self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (h, _) = self.bn1.forward(x, mode);
        let (h, _) = self.conv1.forward(&relu(&h));
        let (h, _) = self.bn2.forward(&h, mode);
        self.conv2.forward(&relu(&h)).0
    }

    pub fn shortcut(&self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (s, _) = self.shortcut_conv.forward(x);
        self.shortcut_bn.forward(&s, mode).0
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, ResidualCache<T>) {
        let (h, bn1) = self.bn1.forward(x, mode);
        let a1 = relu(&h);
        let (h, conv1_in) = self.conv1.forward(&a1);
        let (h, bn2) = self.bn2.forward(&h, mode);
        let a2 = relu(&h);
        let (f, conv2_in) = self.conv2.forward(&a2);
        let (s, sc_in) = self.shortcut_conv.forward(x);
        let (s, sc_bn) = self.shortcut_bn.forward(&s, mode);
        let out = relu(&(f + s));
        let cache = ResidualCache { bn1, a1, conv1_in, bn2, a2, conv2_in, sc_in, sc_bn, out: out.clone() };
        (out, cache)
    }

    pub fn backward(&self, c: &ResidualCache<T>, dy: &Array4<T>, g: &mut ResidualUnit<T>) -> Array4<T> {
        let dsum = relu_backward(&c.out, dy);
        let ds = self.shortcut_bn.backward(&c.sc_bn, &dsum, &mut g.shortcut_bn);
        let mut dx = self.shortcut_conv.backward(&c.sc_in, &ds, &mut g.shortcut_conv);
        let da2 = self.conv2.backward(&c.conv2_in, &dsum, &mut g.conv2);
        let dh = self.bn2.backward(&c.bn2, &relu_backward(&c.a2, &da2), &mut g.bn2);
        let da1 = self.conv1.backward(&c.conv1_in, &dh, &mut g.conv1);
        dx += &self.bn1.backward(&c.bn1, &relu_backward(&c.a1, &da1), &mut g.bn1);
        dx
    }

    fn update_running_stats(&mut self, c: &ResidualCache<T>) {
        self.bn1.update_running_stats(&c.bn1);
        self.bn2.update_running_stats(&c.bn2);
        self.shortcut_bn.update_running_stats(&c.sc_bn);
    }
}

impl<T: Scalar> Parameterized<T> for ResidualUnit<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.bn1.visit(&join(p, "bn1"), f);
        self.conv1.visit(&join(p, "conv1"), f);
        self.bn2.visit(&join(p, "bn2"), f);
        self.conv2.visit(&join(p, "conv2"), f);
        self.shortcut_conv.visit(&join(p, "shortcut_conv"), f);
        self.shortcut_bn.visit(&join(p, "shortcut_bn"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.bn1.visit_mut(&join(p, "bn1"), f);
        self.conv1.visit_mut(&join(p, "conv1"), f);
        self.bn2.visit_mut(&join(p, "bn2"), f);
        self.conv2.visit_mut(&join(p, "conv2"), f);
        self.shortcut_conv.visit_mut(&join(p, "shortcut_conv"), f);
        self.shortcut_bn.visit_mut(&join(p, "shortcut_bn"), f);
    }

    fn visit_buffers(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.bn1.visit_buffers(&join(p, "bn1"), f);
        self.bn2.visit_buffers(&join(p, "bn2"), f);
        self.shortcut_bn.visit_buffers(&join(p, "shortcut_bn"), f);
    }

    fn visit_buffers_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.bn1.visit_buffers_mut(&join(p, "bn1"), f);
        self.bn2.visit_buffers_mut(&join(p, "bn2"), f);
        self.shortcut_bn.visit_buffers_mut(&join(p, "shortcut_bn"), f);
    }
}

/// Conv-BN-ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache<T> {
    conv_in: Array4<T>,
    bn: BnCache<T>,
    out: Array4<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv2d::new(cin, cout, 3, 1, rng), bn: BatchNorm2d::new(cout) }
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, ConvBlockCache<T>) {
        let (h, conv_in) = self.conv.forward(x);
        let (h, bn) = self.bn.forward(&h, mode);
        let out = relu(&h);
        (out.clone(), ConvBlockCache { conv_in, bn, out })
    }

    pub fn backward(&self, c: &ConvBlockCache<T>, dy: &Array4<T>, g: &mut ConvBlock<T>) -> Array4<T> {
        let dh = self.bn.backward(&c.bn, &relu_backward(&c.out, dy), &mut g.bn);
        self.conv.backward(&c.conv_in, &dh, &mut g.conv)
    }
}

impl<T: Scalar> Parameterized<T> for ConvBlock<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.conv.visit(&join(p, "conv"), f);
        self.bn.visit(&join(p, "bn"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.conv.visit_mut(&join(p, "conv"), f);
        self.bn.visit_mut(&join(p, "bn"), f);
    }

    fn visit_buffers(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.bn.visit_buffers(&join(p, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.bn.visit_buffers_mut(&join(p, "bn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock<T> {
    pub first: ConvBlock<T>,
    pub second: ConvBlock<T>,
}

#[derive(Debug, Clone)]
pub struct ResUnet<T> {
    pub config: ModelConfig,
    pub stem: ConvBlock<T>,
    pub encoder: [ResidualUnit<T>; 3],
    pub decoder: [DecoderBlock<T>; 3],
    pub head: ConvBlock<T>,
    /// Final linear (1x1) projection to D channels, no activation.
    pub linear: Conv2d<T>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ResUnetCache<T> {
    stem: ConvBlockCache<T>,
    pool: PoolCache,
    enc: Vec<ResidualCache<T>>,
    dec: Vec<(ConvBlockCache<T>, ConvBlockCache<T>)>,
    dec_widths: Vec<usize>,
    head: ConvBlockCache<T>,
    linear_in: Array4<T>,
}

/// Forward output: the D-channel features and the penultimate (head) activations.
#[derive(Debug, Clone)]
pub struct ResUnetOutput<T> {
    pub features: Array4<T>,
    pub hidden: Array4<T>,
}

impl<T: Scalar> ResUnet<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.stem_channels;
        let [c1, c2, c3] = [config.encoder_channels[0], config.encoder_channels[1], config.encoder_channels[2]];
        let stem = ConvBlock::new(config.in_bands, s, &mut rng);
        let encoder = [
            ResidualUnit::new(s, c1, 1, &mut rng),
            ResidualUnit::new(c1, c2, 2, &mut rng),
            ResidualUnit::new(c2, c3, 2, &mut rng),
        ];
        let decoder = [
            DecoderBlock { first: ConvBlock::new(c3, c3, &mut rng), second: ConvBlock::new(c3, c3, &mut rng) },
            DecoderBlock { first: ConvBlock::new(2 * c3, c2, &mut rng), second: ConvBlock::new(c2, c2, &mut rng) },
            DecoderBlock { first: ConvBlock::new(2 * c2, c1, &mut rng), second: ConvBlock::new(c1, c1, &mut rng) },
        ];
        let head = ConvBlock::new(2 * c1, s, &mut rng);
        let linear = Conv2d::new(s, config.feature_dim, 1, 1, &mut rng);
        Ok(Self { config: config.clone(), stem, encoder, decoder, head, linear })
    }

    pub fn hidden_channels(&self) -> usize {
        self.config.stem_channels
    }

    pub fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        ensure!(n >= 1, Shape, "empty batch");
        ensure!(c == self.config.in_bands, Shape, "expected {} bands, got {c}", self.config.in_bands);
        ensure!(
            h > 0 && w > 0 && h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0,
            Shape,
            "spatial dims {h}x{w} must be positive multiples of {DOWNSAMPLE}"
        );
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("input contains NaN or infinite values".into()));
        }
        Ok(())
    }

    /// Output features only; the usual inference entry point.
    pub fn features(&self, x: &Array4<T>, mode: Mode) -> Result<FeatureMap<T>> {
        Ok(FeatureMap::new(self.forward(x, mode)?.0.features))
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<(ResUnetOutput<T>, ResUnetCache<T>)> {
        self.check_input(x)?;
        let (h, stem) = self.stem.forward(x, mode);
        let (h, pool) = maxpool2(&h);
        let mut enc = Vec::with_capacity(3);
        let mut skips = Vec::with_capacity(3);
        let mut h = h;
        for unit in &self.encoder {
            let (o, c) = unit.forward(&h, mode);
            enc.push(c);
            skips.push(o.clone());
            h = o;
        }
        let mut dec = Vec::with_capacity(3);
        let mut dec_widths = Vec::with_capacity(3);
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let (a, c1) = block.first.forward(&h, mode);
            let (a, c2) = block.second.forward(&a, mode);
            dec_widths.push(a.dim().1);
            h = upsample2(&concat_channels(&a, skip));
            dec.push((c1, c2));
        }
        let (hidden, head) = self.head.forward(&h, mode);
        let (features, linear_in) = self.linear.forward(&hidden);
        let cache = ResUnetCache { stem, pool, enc, dec, dec_widths, head, linear_in };
        Ok((ResUnetOutput { features, hidden }, cache))
    }

    /// Backpropagates gradients w.r.t. the features (and optionally the hidden
    /// activations) into `grads`, returning the input gradient.
    pub fn backward(
        &self,
        cache: &ResUnetCache<T>,
        d_features: &Array4<T>,
        d_hidden: Option<&Array4<T>>,
        grads: &mut ResUnet<T>,
    ) -> Array4<T> {
        let mut dh = self.linear.backward(&cache.linear_in, d_features, &mut grads.linear);
        if let Some(extra) = d_hidden {
            dh += extra;
        }
        let mut d = self.head.backward(&cache.head, &dh, &mut grads.head);
        let mut d_skips: Vec<Option<Array4<T>>> = vec![None, None, None];
        for k in (0..3).rev() {
            let dcat = upsample2_backward(&d);
            let (da, dskip) = concat_channels_backward(&dcat, cache.dec_widths[k]);
            d_skips[2 - k] = Some(dskip);
            let block = &self.decoder[k];
            let (c1, c2) = &cache.dec[k];
            let da = block.second.backward(c2, &da, &mut grads.decoder[k].second);
            d = block.first.backward(c1, &da, &mut grads.decoder[k].first);
        }
        // `d` now holds the gradient flowing into dec1's input, i.e. enc3's output.
        for k in (0..3).rev() {
            if let Some(ds) = d_skips[k].take() {
                d += &ds;
            }
            d = self.encoder[k].backward(&cache.enc[k], &d, &mut grads.encoder[k]);
        }
        let d = maxpool2_backward(&cache.pool, &d);
        self.stem.backward(&cache.stem, &d, &mut grads.stem)
    }

    pub fn update_running_stats(&mut self, cache: &ResUnetCache<T>) {
        let ConvBlockCache { bn, .. } = &cache.stem;
        self.stem.bn.update_running_stats(bn);
        for (unit, c) in self.encoder.iter_mut().zip(&cache.enc) {
            unit.update_running_stats(c);
        }
        for (block, (c1, c2)) in self.decoder.iter_mut().zip(&cache.dec) {
            block.first.bn.update_running_stats(&c1.bn);
            block.second.bn.update_running_stats(&c2.bn);
        }
        self.head.bn.update_running_stats(&cache.head.bn);
    }
}

impl<T: Scalar> Parameterized<T> for ResUnet<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.stem.visit(&join(p, "stem"), f);
        for (i, u) in self.encoder.iter().enumerate() {
            u.visit(&join(p, &format!("enc{}", i + 1)), f);
        }
        for (i, d) in self.decoder.iter().enumerate() {
            d.first.visit(&join(p, &format!("dec{}.first", i + 1)), f);
            d.second.visit(&join(p, &format!("dec{}.second", i + 1)), f);
        }
        self.head.visit(&join(p, "head"), f);
        self.linear.visit(&join(p, "linear"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.stem.visit_mut(&join(p, "stem"), f);
        for (i, u) in self.encoder.iter_mut().enumerate() {
            u.visit_mut(&join(p, &format!("enc{}", i + 1)), f);
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.first.visit_mut(&join(p, &format!("dec{}.first", i + 1)), f);
            d.second.visit_mut(&join(p, &format!("dec{}.second", i + 1)), f);
        }
        self.head.visit_mut(&join(p, "head"), f);
        self.linear.visit_mut(&join(p, "linear"), f);
    }

    fn visit_buffers(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.stem.visit_buffers(&join(p, "stem"), f);
        for (i, u) in self.encoder.iter().enumerate() {
            u.visit_buffers(&join(p, &format!("enc{}", i + 1)), f);
        }
        for (i, d) in self.decoder.iter().enumerate() {
            d.first.visit_buffers(&join(p, &format!("dec{}.first", i + 1)), f);
            d.second.visit_buffers(&join(p, &format!("dec{}.second", i + 1)), f);
        }
        self.head.visit_buffers(&join(p, "head"), f);
    }

    fn visit_buffers_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.stem.visit_buffers_mut(&join(p, "stem"), f);
        for (i, u) in self.encoder.iter_mut().enumerate() {
            u.visit_buffers_mut(&join(p, &format!("enc{}", i + 1)), f);
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.first.visit_buffers_mut(&join(p, &format!("dec{}.first", i + 1)), f);
            d.second.visit_buffers_mut(&join(p, &format!("dec{}.second", i + 1)), f);
        }
        self.head.visit_buffers_mut(&join(p, "head"), f);
    }
}

/// Copies every learnable tensor and buffer from `src` into `dst` by name.
pub fn copy_state<T: Scalar, A: Parameterized<T>, B: Parameterized<T>>(src: &A, dst: &mut B) -> Result<()> {
    let mut tensors = std::collections::HashMap::new();
    src.visit("", &mut |n, v| {
        tensors.insert(n, v.to_owned());
    });
    src.visit_buffers("", &mut |n, v| {
        tensors.insert(n, v.to_owned());
    });
    let mut missing = Vec::new();
    let mut assign = |n: String, mut v: ArrayViewMutD<'_, T>| match tensors.get(&n) {
        Some(t) if t.shape() == v.shape() => v.assign(t),
        _ => missing.push(n),
    };
    dst.visit_mut("", &mut assign);
    dst.visit_buffers_mut("", &mut assign);
    ensure!(missing.is_empty(), Config, "topology mismatch, cannot copy: {}", missing.join(", "));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like;
    use ndarray::Axis;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_config(in_bands: usize, d: usize) -> ModelConfig {
        ModelConfig { in_bands, feature_dim: d, stem_channels: 4, encoder_channels: vec![4, 6, 8], seed: 1 }
    }

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = ModelConfig { seed: 7, ..tiny_config(3, 4) };
        let a = ResUnet::<f32>::new(&cfg).unwrap();
        let b = ResUnet::<f32>::new(&cfg).unwrap();
        let pa = a.collect_params();
        let pb = b.collect_params();
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert!(ta.iter().zip(tb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig { in_bands: 0, ..ModelConfig::default() };
        assert!(matches!(ResUnet::<f32>::new(&bad), Err(Error::Config(_))));
        let bad = ModelConfig { encoder_channels: vec![8, 16], ..ModelConfig::default() };
        assert!(matches!(ResUnet::<f32>::new(&bad), Err(Error::Config(_))));
        let bad = ModelConfig { feature_dim: 1, ..ModelConfig::default() };
        assert!(matches!(ResUnet::<f32>::new(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn forward_preserves_spatial_dims() {
        let cfg = ModelConfig { in_bands: 13, feature_dim: 32, stem_channels: 4, encoder_channels: vec![4, 4, 4], seed: 0 };
        let net = ResUnet::<f32>::new(&cfg).unwrap();
        let x = Array4::<f32>::zeros((2, 13, 64, 64));
        let f = net.features(&x, Mode::Eval).unwrap();
        assert_eq!(f.dim(), (2, 32, 64, 64));
        assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let net = ResUnet::<f64>::new(&tiny_config(2, 4)).unwrap();
        let x = Array4::<f64>::zeros((1, 2, 12, 16));
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::Shape(_))));
        let x = Array4::<f64>::zeros((1, 3, 16, 16));
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::Shape(_))));
        let mut x = Array4::<f64>::zeros((1, 2, 16, 16));
        x[[0, 1, 3, 3]] = f64::NAN;
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::Input(_))));
    }

    #[test]
    fn residual_unit_with_zeroed_branch_is_relu_of_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut unit = ResidualUnit::<f64>::new(3, 5, 2, &mut rng);
        unit.conv1.weight.fill(0.0);
        unit.conv1.bias.fill(0.0);
        unit.conv2.weight.fill(0.0);
        unit.conv2.bias.fill(0.0);
        let x = random_input((2, 3, 8, 8), 3);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = unit.forward(&x, mode);
            let expected = unit.shortcut(&x, mode).mapv(|v| v.max(0.0));
            assert_eq!(y, expected);
            assert!(unit.residual(&x, mode).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = tiny_config(1, 4);
        let net = ResUnet::<f64>::new(&cfg).unwrap();
        let x = random_input((2, 1, 8, 8), 21);
        for mode in [Mode::Train, Mode::Eval] {
            let loss = |x: &Array4<f64>| net.forward(x, mode).unwrap().0.features.mapv(|v| v * v).sum();
            let (out, cache) = net.forward(&x, mode).unwrap();
            let mut g = zeros_like(&net);
            let dx = net.backward(&cache, &out.features.mapv(|v| 2.0 * v), None, &mut g);
            let eps = 1e-6;
            let mut worst = 0.0f64;
            for idx in [[0, 0, 0, 0], [0, 0, 3, 4], [1, 0, 7, 7], [1, 0, 2, 5], [0, 0, 6, 1]] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
                let rel = (fd - dx[idx]).abs() / fd.abs().max(dx[idx].abs()).max(1e-8);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-3, "{mode:?}: relative error {worst}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = tiny_config(2, 3);
        let net = ResUnet::<f64>::new(&cfg).unwrap();
        let x = random_input((2, 2, 8, 8), 8);
        let loss = |n: &ResUnet<f64>| n.forward(&x, Mode::Train).unwrap().0.features.mapv(|v| v * v).sum();
        let (out, cache) = net.forward(&x, Mode::Train).unwrap();
        let mut g = zeros_like(&net);
        net.backward(&cache, &out.features.mapv(|v| 2.0 * v), None, &mut g);
        let eps = 1e-6;
        let probes: [(fn(&mut ResUnet<f64>) -> &mut f64, fn(&ResUnet<f64>) -> f64); 3] = [
            (|n| &mut n.stem.conv.weight[[1, 0, 1, 2]], |g| g.stem.conv.weight[[1, 0, 1, 2]]),
            (|n| &mut n.encoder[1].conv2.weight[[0, 2, 0, 1]], |g| g.encoder[1].conv2.weight[[0, 2, 0, 1]]),
            (|n| &mut n.decoder[2].first.bn.gamma[1], |g| g.decoder[2].first.bn.gamma[1]),
        ];
        for (get, read) in probes {
            let mut p = net.clone();
            *get(&mut p) += eps;
            let mut m = net.clone();
            *get(&mut m) -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            let an = read(&g);
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-3, "{fd} vs {an}");
        }
    }

    #[test]
    fn stem_without_padding_is_translation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut block = ConvBlock::<f64>::new(1, 3, &mut rng);
        block.conv.padding = 0;
        let spike = |r: usize, c: usize| {
            let mut x = Array4::<f64>::from_elem((1, 1, 40, 40), 0.1);
            x[[0, 0, r, c]] = 5.0;
            x
        };
        let peak = |y: &Array4<f64>| {
            let plane = y.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
            let (mut best, mut at) = (f64::MIN, (0, 0));
            for ((i, j), &v) in plane.indexed_iter() {
                if v > best {
                    best = v;
                    at = (i, j);
                }
            }
            at
        };
        let base = block.conv.forward(&spike(16, 16)).0;
        let moved = block.conv.forward(&spike(20, 16)).0;
        let (r0, c0) = peak(&base.mapv(f64::abs));
        let (r1, c1) = peak(&moved.mapv(f64::abs));
        assert_eq!((r1, c1), (r0 + 4, c0));
        let b0 = maxpool2(&block.forward(&spike(16, 16), Mode::Eval).0).0;
        let b1 = maxpool2(&block.forward(&spike(16, 20), Mode::Eval).0).0;
        let (r0, c0) = peak(&b0);
        let (r1, c1) = peak(&b1);
        assert_eq!((r1, c1), (r0, c0 + 2));
    }

    #[test]
    fn normalize_examples() {
        let x = Array4::from_shape_vec((1, 2, 1, 2), vec![3.0f64, 0.0, 4.0, 0.0]).unwrap();
        let f = normalize_pixels(&FeatureMap::new(x));
        assert!((f.values[[0, 0, 0, 0]] - 0.6).abs() < 1e-12);
        assert!((f.values[[0, 1, 0, 0]] - 0.8).abs() < 1e-12);
        assert_eq!(f.values[[0, 0, 0, 1]], 0.0);
        assert_eq!(f.degenerate, vec![(0, 0, 1)]);
        let again = normalize_pixels(&f);
        assert_eq!(again.values, f.values);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = random_input((1, 3, 2, 2), 5);
        let r = random_input((1, 3, 2, 2), 6);
        let (y, _) = normalize_array(&x);
        let dx = normalize_pixels_backward(&x, &y, &r);
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 2, 1, 1]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = ((&normalize_array(&xp).0 * &r).sum() - (&normalize_array(&xm).0 * &r).sum()) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn concurrent_eval_forwards_agree() {
        let net = ResUnet::<f32>::new(&ModelConfig { in_bands: 2, ..tiny_config(2, 4) }).unwrap();
        let x = Array4::<f32>::from_shape_fn((1, 2, 16, 16), |(_, c, i, j)| (c + i * j) as f32 * 0.01);
        let reference = net.features(&x, Mode::Eval).unwrap().values;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..4).map(|_| s.spawn(|| net.features(&x, Mode::Eval).unwrap().values)).collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), reference);
            }
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn output_dims_track_input(hm in 1usize..5, wm in 1usize..5, bands in 1usize..4) {
            let net = ResUnet::<f32>::new(&tiny_config(bands, 3)).unwrap();
            let x = Array4::<f32>::from_elem((1, bands, hm * 8, wm * 8), 0.5);
            let f = net.features(&x, Mode::Eval).unwrap();
            prop_assert_eq!(f.dim(), (1, 3, hm * 8, wm * 8));
        }

        #[test]
        fn normalize_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let x = Array4::from_shape_vec((1, 4, 1, 1), v).unwrap();
            let once = normalize_pixels(&FeatureMap::new(x));
            let twice = normalize_pixels(&once);
            for (a, b) in once.values.iter().zip(twice.values.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
