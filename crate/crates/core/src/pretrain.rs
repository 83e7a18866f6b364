//! Self-supervised teacher training.
//!
//! Each training item is a scene and two distinct timestamps. Shifted,
//! flipped crops of the two images go through the shared backbone; one
//! anchor per superpixel of crop a (inside the overlap) is matched with the
//! same scene location in crop b. The contrastive term pulls these positive
//! pairs together against a pool of other anchors' positives; the codebook
//! term spreads usage over the codewords.
//!
//! With [`ContrastiveInputs::Cross`] the continuous features of one branch
//! are contrasted with the quantized features of the other, in both
//! directions. Inference always uses the unit-normalized continuous features.

use std::path::Path;

use ndarray::{s, stack, Array1, Array2, Array4, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind};
use crate::data::RasterImage;
use crate::error::{ensure, Error, Result};
use crate::losses::{contrastive_loss, grouped_codebook_loss, pretrain_total, ContrastiveBatch};
use crate::model::{normalize_array, normalize_pixels_backward, FeatureMap, ModelConfig, ResUnet, ResUnetCache};
use crate::nn::{join, zeros_like, Mode, Parameterized};
use crate::optim::{Adam, StepLr};
use crate::quantizer::{perplexity, Codebook, QuantizeBranches, QuantizeCache, QuantizerConfig, QuantizerOutput};
use crate::sampling::{felzenszwalb_segment, sample_anchors_with, SegmentParams};
use crate::views::{sample_view_pair_with, PairGeometry, ViewConfig, ViewPair};
use crate::{seed_for, Scalar};

/// One scene: co-registered images of the same area at several times.
pub type Scene<T> = Vec<RasterImage<T>>;

#[derive(Debug, Clone)]
pub struct Teacher<T> {
    pub backbone: ResUnet<T>,
    pub codebook: Codebook<T>,
    pub quantizer: QuantizerConfig,
}

impl<T: Scalar> Teacher<T> {
    pub fn new(model: &ModelConfig, quantizer: &QuantizerConfig) -> Result<Self> {
        let backbone = ResUnet::new(model)?;
        let codebook = Codebook::new(model.feature_dim, quantizer, model.seed)?;
        Ok(Self { backbone, codebook, quantizer: quantizer.clone() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    /// Unit-normalized continuous features in eval mode, (B, D, H, W).
    pub fn features(&self, x: &Array4<T>) -> Result<FeatureMap<T>> {
        let f = self.backbone.features(x, Mode::Eval)?;
        let (values, degenerate) = normalize_array(&f.values);
        Ok(FeatureMap { values, normalized: true, degenerate })
    }

    pub fn image_features(&self, image: &RasterImage<T>) -> Result<FeatureMap<T>> {
        self.features(&image.data.clone().insert_axis(Axis(0)))
    }

    pub fn to_bytes(&self, training: serde_json::Value) -> Result<Vec<u8>> {
        checkpoint::encode(ModelKind::Teacher, self.config(), Some(&self.quantizer), training, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, _) = checkpoint::decode_header(bytes)?;
        ensure!(header.kind == ModelKind::Teacher, Format, "checkpoint holds a {:?}, expected a teacher", header.kind);
        let q = header.quantizer.clone().ok_or_else(|| Error::Format("teacher checkpoint lacks a quantizer config".into()))?;
        let mut t = Self::new(&header.model, &q)?;
        checkpoint::load_into(bytes, &mut t)?;
        Ok(t)
    }

    pub fn save(&self, path: &Path, training: serde_json::Value) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes(training)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl<T: Scalar> Parameterized<T> for Teacher<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'_, T>)) {
        self.backbone.visit(&join(p, "backbone"), f);
        self.codebook.visit(&join(p, "codebook"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, T>)) {
        self.backbone.visit_mut(&join(p, "backbone"), f);
        self.codebook.visit_mut(&join(p, "codebook"), f);
    }

    fn visit_buffers(&self, p: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'_, T>)) {
        self.backbone.visit_buffers(&join(p, "backbone"), f);
    }

    fn visit_buffers_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, T>)) {
        self.backbone.visit_buffers_mut(&join(p, "backbone"), f);
    }
}

/// Which feature pairs enter the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveInputs {
    /// Continuous features of one branch against quantized features of the other.
    Cross,
    /// Quantized against quantized (continuous for an unquantized branch).
    Quantized,
    /// Continuous against continuous; the quantizer only sees the codebook term.
    /// Default: the hard-sampled paths barely train in a few hundred steps.
    #[default]
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub step_gamma: f64,
    /// Decay period as a fraction of `epochs`.
    pub step_fraction: f64,
    pub seed: u64,
    /// Training items drawn per scene and epoch.
    pub samples_per_scene: usize,
    pub view: ViewConfig,
    pub segment: SegmentParams,
    pub max_anchors: usize,
    pub max_negatives: usize,
    pub temperature: f64,
    /// Weight of the codebook diversity term; 0 ablates it.
    pub codebook_weight: f64,
    pub contrastive_inputs: ContrastiveInputs,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 16,
            epochs: 50,
            step_gamma: 0.5,
            step_fraction: 0.4,
            seed: 0,
            samples_per_scene: 16,
            view: ViewConfig { crop_size: 48, max_offset: 8, flips: true },
            segment: SegmentParams::default(),
            max_anchors: 128,
            max_negatives: 256,
            temperature: 0.1,
            codebook_weight: 1.0,
            contrastive_inputs: ContrastiveInputs::Continuous,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive, got {}", self.lr);
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.samples_per_scene >= 1, Config, "samples_per_scene must be >= 1");
        ensure!(self.max_anchors >= 1, Config, "max_anchors must be >= 1");
        ensure!(self.temperature > 0.0, Config, "temperature must be positive");
        ensure!(self.codebook_weight >= 0.0, Config, "codebook_weight must be >= 0");
        ensure!(
            self.view.crop_size.is_multiple_of(crate::model::DOWNSAMPLE),
            Config,
            "crop_size {} must be a multiple of {}",
            self.view.crop_size,
            crate::model::DOWNSAMPLE
        );
        self.schedule().validate()
    }

    pub fn schedule(&self) -> StepLr {
        StepLr::for_run(self.lr, self.step_gamma, self.step_fraction, self.epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub contrastive: f64,
    pub codebook: f64,
    pub total: f64,
    pub perplexity: f64,
    pub lr: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,L_c,L_d,L_total,perplexity,lr\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.3e}\n",
            e.epoch, e.contrastive, e.codebook, e.total, e.perplexity, e.lr
        ));
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Za,
    Zb,
    Qa,
    Qb,
}

impl Source {
    fn branch_b(self) -> bool {
        matches!(self, Source::Zb | Source::Qb)
    }
}

fn terms(inputs: ContrastiveInputs, branches: QuantizeBranches) -> Vec<(Source, Source)> {
    use Source::*;
    match (inputs, branches) {
        (ContrastiveInputs::Continuous, _) => vec![(Za, Zb)],
        (ContrastiveInputs::Quantized, QuantizeBranches::Both) => vec![(Qa, Qb)],
        (ContrastiveInputs::Quantized, QuantizeBranches::FirstOnly) => vec![(Qa, Zb)],
        (ContrastiveInputs::Cross, QuantizeBranches::Both) => vec![(Za, Qb), (Zb, Qa)],
        (ContrastiveInputs::Cross, QuantizeBranches::FirstOnly) => vec![(Zb, Qa)],
    }
}

/// Anchor location in both flipped views.
#[derive(Debug, Clone, Copy)]
struct Anchor {
    item: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Anchor {
    fn at(&self, branch_b: bool) -> (usize, usize) {
        if branch_b {
            self.b
        } else {
            self.a
        }
    }
}

fn gather<T: Scalar>(grid: &Array4<T>, anchors: &[Anchor], branch_b: bool) -> Array2<T> {
    let d = grid.dim().1;
    let mut out = Array2::zeros((anchors.len(), d));
    for (r, an) in anchors.iter().enumerate() {
        let (i, j) = an.at(branch_b);
        out.row_mut(r).assign(&grid.slice(s![an.item, .., i, j]));
    }
    out
}

fn scatter_add<T: Scalar>(grad: &mut Array4<T>, rows: &Array2<T>, anchors: &[Anchor], branch_b: bool) {
    for (r, an) in anchors.iter().enumerate() {
        let (i, j) = an.at(branch_b);
        let mut dst = grad.slice_mut(s![an.item, .., i, j]);
        dst += &rows.row(r);
    }
}

/// Superpixel anchors of one view pair, in view coordinates.
fn pair_anchors<T: Scalar, R: Rng>(
    pair: &ViewPair<T>,
    item: usize,
    segment: &SegmentParams,
    cap: usize,
    rng: &mut R,
) -> Result<Vec<Anchor>> {
    let geom = pair.geometry();
    let seg = felzenszwalb_segment(pair.scene_crop_a().view(), segment)?;
    let (oh, ow) = geom.overlap_dims();
    let (r0, c0) = geom.overlap_origin_a();
    let mask = Array2::from_shape_fn((geom.size, geom.size), |(i, j)| {
        (r0..r0 + oh).contains(&i) && (c0..c0 + ow).contains(&j)
    });
    let mut picks = sample_anchors_with(&seg, mask.view(), 1, rng)?;
    if picks.len() > cap {
        let keep = index::sample(rng, picks.len(), cap).into_vec();
        picks = keep.into_iter().map(|k| picks[k]).collect();
    }
    Ok(picks.into_iter().map(|(i, j)| overlap_anchor(&geom, item, i - r0, j - c0)).collect())
}

fn overlap_anchor(geom: &PairGeometry, item: usize, i: usize, j: usize) -> Anchor {
    Anchor { item, a: geom.overlap_to_view(false, i, j), b: geom.overlap_to_view(true, i, j) }
}

/// Per-anchor random subsets of the other anchors, at most `cap` each.
fn negative_pool<R: Rng>(m: usize, cap: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..m)
        .map(|i| {
            let k = cap.min(m - 1);
            index::sample(rng, m - 1, k).into_iter().map(|j| if j >= i { j + 1 } else { j }).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub contrastive: f64,
    pub codebook: f64,
    pub total: f64,
    pub perplexity: f64,
    pub anchors: usize,
}

struct Branch<T> {
    raw: Array4<T>,
    unit: Array4<T>,
    cache: ResUnetCache<T>,
    quant: Option<(QuantizerOutput<T>, QuantizeCache<T>, Array4<T>)>,
}

fn run_branch<T: Scalar, R: Rng>(
    teacher: &Teacher<T>,
    x: &Array4<T>,
    quantize: bool,
    tau: T,
    rng: &mut R,
) -> Result<Branch<T>> {
    let (out, cache) = teacher.backbone.forward(x, Mode::Train)?;
    let raw = out.features;
    let (unit, _) = normalize_array(&raw);
    let quant = if quantize {
        let (q, qc) = teacher.codebook.quantize(&FeatureMap::new(unit.clone()), Mode::Train, tau, rng)?;
        let (qu, _) = normalize_array(&q.quantized.values);
        Some((q, qc, qu))
    } else {
        None
    };
    Ok(Branch { raw, unit, cache, quant })
}

/// Forward and backward on one batch of view pairs. Gradients accumulate
/// into `grads`; returns the losses and both backbone caches for the
/// running-statistics update.
pub fn batch_gradients<T: Scalar, R: Rng>(
    teacher: &Teacher<T>,
    pairs: &[ViewPair<T>],
    cfg: &PretrainConfig,
    tau: f64,
    grads: &mut Teacher<T>,
    rng: &mut R,
) -> Result<(StepStats, [ResUnetCache<T>; 2])> {
    ensure!(!pairs.is_empty(), Input, "empty batch");
    let xa = stack(Axis(0), &pairs.iter().map(|p| p.view_a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let xb = stack(Axis(0), &pairs.iter().map(|p| p.view_b.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let tau_t = T::lit(tau);
    let qb = teacher.quantizer.branches == QuantizeBranches::Both;
    let a = run_branch(teacher, &xa, true, tau_t, rng)?;
    let b = run_branch(teacher, &xb, qb, tau_t, rng)?;

    let mut anchors = Vec::new();
    for (k, p) in pairs.iter().enumerate() {
        anchors.extend(pair_anchors(p, k, &cfg.segment, cfg.max_anchors, rng)?);
    }
    let grid = |src: Source| -> &Array4<T> {
        match src {
            Source::Za => &a.unit,
            Source::Zb => &b.unit,
            Source::Qa => &a.quant.as_ref().expect("branch a is quantized").2,
            Source::Qb => &b.quant.as_ref().expect("branch b quantized").2,
        }
    };
    let term_list = terms(cfg.contrastive_inputs, teacher.quantizer.branches);
    // Zero feature vectors have no direction; such anchors are skipped.
    anchors.retain(|an| {
        term_list.iter().flat_map(|&(x, y)| [x, y]).all(|src| {
            let (i, j) = an.at(src.branch_b());
            let v = grid(src).slice(s![an.item, .., i, j]);
            v.dot(&v) > T::lit(0.25)
        })
    });
    let m = anchors.len();
    ensure!(m >= 2, Input, "batch yielded {m} usable anchors, need at least 2");
    let pool = negative_pool(m, cfg.max_negatives, rng);

    let mut d_za = Array4::<T>::zeros(a.unit.dim());
    let mut d_zb = Array4::<T>::zeros(b.unit.dim());
    let mut d_qa = Array4::<T>::zeros(a.unit.dim());
    let mut d_qb = Array4::<T>::zeros(b.unit.dim());
    let weight = T::one() / T::from_usize_lossy(term_list.len());
    let mut lc = T::zero();
    for (src_a, src_p) in term_list {
        let positives = gather(grid(src_p), &anchors, src_p.branch_b());
        let batch = ContrastiveBatch {
            anchors: gather(grid(src_a), &anchors, src_a.branch_b()),
            negatives: positives.clone(),
            positives,
            negative_index: Some(pool.clone()),
            temperature: T::lit(cfg.temperature),
        };
        let (loss, g) = contrastive_loss(&batch)?;
        lc += loss * weight;
        let gp = (g.positives + g.negatives) * weight;
        let ga = g.anchors * weight;
        for (src, rows) in [(src_a, ga), (src_p, gp)] {
            let target = match src {
                Source::Za => &mut d_za,
                Source::Zb => &mut d_zb,
                Source::Qa => &mut d_qa,
                Source::Qb => &mut d_qb,
            };
            scatter_add(target, &rows, &anchors, src.branch_b());
        }
    }

    // Codebook term on the mean usage of the quantized branches.
    let quantized: Vec<&QuantizerOutput<T>> = [&a.quant, &b.quant].into_iter().flatten().map(|q| &q.0).collect();
    let nq = T::from_usize_lossy(quantized.len());
    let usage = quantized.iter().fold(Array2::<T>::zeros(quantized[0].usage.dim()), |acc, q| acc + &q.usage) / nq;
    let (ld, gd) = grouped_codebook_loss(&usage)?;
    let w = T::lit(cfg.codebook_weight);
    let total = pretrain_total(lc, w * ld);
    if !total.is_finite() {
        return Err(Error::Diverged(format!("non-finite pretraining loss (L_c {lc}, L_d {ld})")));
    }
    let flat_gd: Array1<T> = gd.iter().copied().collect();

    let finish = |br: &Branch<T>, d_unit: Array4<T>, d_q: Array4<T>, grads: &mut Teacher<T>| -> Array4<T> {
        let mut d_unit = d_unit;
        if let Some((q, qc, qu)) = &br.quant {
            let (b_, _, h, w_) = br.unit.dim();
            let pixels = T::from_usize_lossy(b_ * h * w_);
            let d_probs = flat_gd.mapv(|g| g * w / (nq * pixels));
            let dv = normalize_pixels_backward(&q.quantized.values, qu, &d_q);
            d_unit += &teacher.codebook.backward(q, qc, &dv, Some(&d_probs), &mut grads.codebook);
        }
        normalize_pixels_backward(&br.raw, &br.unit, &d_unit)
    };
    let dza_raw = finish(&a, d_za, d_qa, grads);
    let dzb_raw = finish(&b, d_zb, d_qb, grads);
    teacher.backbone.backward(&a.cache, &dza_raw, None, &mut grads.backbone);
    teacher.backbone.backward(&b.cache, &dzb_raw, None, &mut grads.backbone);

    let hist: Vec<T> = usage.iter().copied().collect();
    let stats = StepStats {
        contrastive: lc.as_f64(),
        codebook: ld.as_f64(),
        total: total.as_f64(),
        perplexity: perplexity(&hist),
        anchors: m,
    };
    Ok((stats, [a.cache, b.cache]))
}

/// Draws one training item: two distinct timestamps (the same image when the
/// scene has only one) and a view pair.
pub fn sample_item<T: Scalar, R: Rng>(scene: &Scene<T>, view: &ViewConfig, rng: &mut R) -> Result<ViewPair<T>> {
    let t = scene.len();
    ensure!(t >= 1, Input, "scene without images");
    let ta = rng.random_range(0..t);
    let tb = if t == 1 { 0 } else { (ta + rng.random_range(1..t)) % t };
    sample_view_pair_with(&scene[ta], &scene[tb], view, rng)
}

#[derive(Debug, Clone)]
pub struct PretrainRun<T> {
    pub teacher: Teacher<T>,
    pub log: Vec<EpochLog>,
}

/// Trains a teacher from scratch. `progress` sees every finished epoch.
pub fn pretrain<T: Scalar>(
    scenes: &[Scene<T>],
    model: &ModelConfig,
    quantizer: &QuantizerConfig,
    cfg: &PretrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<PretrainRun<T>> {
    cfg.validate()?;
    ensure!(!scenes.is_empty(), Input, "pretraining needs at least one scene");
    for (k, s) in scenes.iter().enumerate() {
        ensure!(!s.is_empty(), Input, "scene {k} has no images");
        ensure!(s[0].bands() == model.in_bands, Shape, "scene {k} has {} bands, model expects {}", s[0].bands(), model.in_bands);
    }
    let mut teacher = Teacher::<T>::new(model, quantizer)?;
    let schedule = cfg.schedule();
    let mut adam = Adam::default();
    let items_per_epoch = scenes.len() * cfg.samples_per_scene;
    let batches_per_epoch = items_per_epoch.div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).flat_map(|s| std::iter::repeat_n(s, cfg.samples_per_scene)).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut epoch_rng);
        let mut sums = StepStats::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = seed_for(cfg.seed, epoch as u64, bi as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let pairs = chunk.iter().map(|&s| sample_item(&scenes[s], &cfg.view, &mut rng)).collect::<Result<Vec<_>>>()?;
            let tau = quantizer.temperature(epoch * batches_per_epoch + bi, total_steps);
            let mut grads = zeros_like(&teacher);
            let (stats, caches) = batch_gradients(&teacher, &pairs, cfg, tau, &mut grads, &mut rng)
                .and_then(|r| adam.step(&mut teacher, &grads, lr).map(|_| r))
                .map_err(|e| match e {
                    Error::Diverged(msg) => {
                        Error::Diverged(format!("{msg}; epoch {epoch}, batch {bi}, batch seed {batch_seed}"))
                    }
                    other => other,
                })?;
            for c in &caches {
                teacher.backbone.update_running_stats(c);
            }
            sums.contrastive += stats.contrastive;
            sums.codebook += stats.codebook;
            sums.total += stats.total;
            sums.perplexity += stats.perplexity;
        }
        let n = batches_per_epoch as f64;
        let entry = EpochLog {
            epoch,
            contrastive: sums.contrastive / n,
            codebook: sums.codebook / n,
            total: sums.total / n,
            perplexity: sums.perplexity / n,
            lr,
        };
        log::info!(
            "pretrain epoch {epoch}: L_c {:.4} L_d {:.4} perplexity {:.1} lr {lr:.2e}",
            entry.contrastive,
            entry.codebook,
            entry.perplexity
        );
        progress(&entry);
        log.push(entry);
    }
    Ok(PretrainRun { teacher, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginStats {
    pub positive: f64,
    pub negative: f64,
    pub margin: f64,
    pub pairs: usize,
}

/// Mean cosine of positive pairs (same scene location, two shifted views at
/// different times) against negative pairs (different locations), measured
/// on eval-mode inference features.
pub fn feature_margin<T: Scalar>(
    teacher: &Teacher<T>,
    scenes: &[Scene<T>],
    view: &ViewConfig,
    pairs_per_scene: usize,
    anchors_per_pair: usize,
    seed: u64,
) -> Result<MarginStats> {
    ensure!(!scenes.is_empty() && pairs_per_scene >= 1 && anchors_per_pair >= 2, Input, "nothing to measure");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
    for scene in scenes {
        for _ in 0..pairs_per_scene {
            let pair = sample_item(scene, view, &mut rng)?;
            let geom = pair.geometry();
            let fa = teacher.features(&pair.view_a.clone().insert_axis(Axis(0)))?.values;
            let fb = teacher.features(&pair.view_b.clone().insert_axis(Axis(0)))?.values;
            let (oh, ow) = geom.overlap_dims();
            let picks: Vec<Anchor> = (0..anchors_per_pair)
                .map(|_| overlap_anchor(&geom, 0, rng.random_range(0..oh), rng.random_range(0..ow)))
                .collect();
            let va = gather(&fa, &picks, false);
            let vb = gather(&fb, &picks, true);
            for i in 0..picks.len() {
                pos += va.row(i).dot(&vb.row(i)).as_f64();
                np += 1;
                let j = (i + 1 + rng.random_range(0..picks.len() - 1)) % picks.len();
                neg += va.row(i).dot(&vb.row(j)).as_f64();
                nn += 1;
            }
        }
    }
    let (positive, negative) = (pos / np as f64, neg / nn as f64);
    Ok(MarginStats { positive, negative, margin: positive - negative, pairs: scenes.len() * pairs_per_scene })
}
