//! Teacher-student training of per-pixel uncertainty.
//!
//! The frozen teacher embeds every timestamp once. For a pair of times
//! `(m, n)` the student sees the same crop of both images: its features on
//! image `n` with log-variance `s` are scored against the teacher features of
//! image `m`, and its features on image `m` against the same teacher target.
//! The roles of the two timestamps swap on every other batch.
//!
//! The student is the teacher backbone plus a 1x1 log-variance head on the
//! penultimate activations. The head starts at zero, i.e. unit variance.

use std::path::Path;

use ndarray::{concatenate, s, stack, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind};
use crate::data::RasterImage;
use crate::error::{ensure, Error, Result};
use crate::losses::distill_total;
use crate::model::{normalize_array, normalize_pixels_backward, FeatureMap, ModelConfig, ResUnet, ResUnetCache};
use crate::nn::{join, zeros_like, Conv2d, Mode, Parameterized};
use crate::optim::{Adam, StepLr};
use crate::pretrain::{Scene, Teacher};
use crate::{seed_for, Scalar};

/// Log-variance is clamped to `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct Student<T> {
    pub backbone: ResUnet<T>,
    pub logvar_head: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct StudentOutput<T> {
    /// Unit-normalized mean features (B, D, H, W).
    pub mu: Array4<T>,
    /// Clamped log-variance (B, H, W).
    pub logvar: Array3<T>,
}

pub struct StudentCache<T> {
    backbone: ResUnetCache<T>,
    raw: Array4<T>,
    hidden: Array4<T>,
    logvar_pre: Array3<T>,
}

impl<T: Scalar> Student<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let backbone = ResUnet::new(config)?;
        Ok(Self::with_backbone(backbone))
    }

    /// Student whose backbone is a copy of the teacher's.
    pub fn from_teacher(teacher: &Teacher<T>) -> Self {
        Self::with_backbone(teacher.backbone.clone())
    }

    fn with_backbone(backbone: ResUnet<T>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(backbone.config.seed);
        let mut logvar_head = Conv2d::new(backbone.hidden_channels(), 1, 1, 1, &mut rng);
        logvar_head.zero_params();
        Self { backbone, logvar_head }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<(StudentOutput<T>, StudentCache<T>)> {
        let (out, backbone) = self.backbone.forward(x, mode)?;
        let (mu, _) = normalize_array(&out.features);
        let pre = self.logvar_head.forward(&out.hidden).0.index_axis_move(Axis(1), 0);
        let lim = T::lit(LOGVAR_LIMIT);
        let logvar = pre.mapv(|v| v.max(-lim).min(lim));
        let cache = StudentCache { backbone, raw: out.features, hidden: out.hidden, logvar_pre: pre };
        Ok((StudentOutput { mu, logvar }, cache))
    }

    /// Eval-mode mean features and log-variance.
    pub fn infer(&self, x: &Array4<T>) -> Result<(FeatureMap<T>, Array3<T>)> {
        let (out, _) = self.forward(x, Mode::Eval)?;
        let (mu, degenerate) = normalize_array(&out.mu);
        Ok((FeatureMap { values: mu, normalized: true, degenerate }, out.logvar))
    }

    pub fn image_infer(&self, image: &RasterImage<T>) -> Result<(FeatureMap<T>, Array3<T>)> {
        self.infer(&image.data.clone().insert_axis(Axis(0)))
    }

    /// Backward from gradients on `mu` and `logvar`; the clamp passes no
    /// gradient where it binds.
    pub fn backward(&self, cache: &StudentCache<T>, out: &StudentOutput<T>, d_mu: &Array4<T>, d_logvar: &Array3<T>, grads: &mut Student<T>) {
        let d_raw = normalize_pixels_backward(&cache.raw, &out.mu, d_mu);
        let lim = T::lit(LOGVAR_LIMIT);
        let mut ds = d_logvar.clone();
        Zip::from(&mut ds).and(&cache.logvar_pre).for_each(|d, &p| {
            if p < -lim || p > lim {
                *d = T::zero();
            }
        });
        let ds = ds.insert_axis(Axis(1));
        let d_hidden = self.logvar_head.backward(&cache.hidden, &ds, &mut grads.logvar_head);
        self.backbone.backward(&cache.backbone, &d_raw, Some(&d_hidden), &mut grads.backbone);
    }

    pub fn to_bytes(&self, training: serde_json::Value) -> Result<Vec<u8>> {
        checkpoint::encode(ModelKind::Student, self.config(), None, training, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, _) = checkpoint::decode_header(bytes)?;
        ensure!(header.kind == ModelKind::Student, Format, "checkpoint holds a {:?}, expected a student", header.kind);
        let mut s = Self::new(&header.model)?;
        checkpoint::load_into(bytes, &mut s)?;
        Ok(s)
    }

    pub fn save(&self, path: &Path, training: serde_json::Value) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes(training)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl<T: Scalar> Parameterized<T> for Student<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.backbone.visit(&join(p, "backbone"), f);
        self.logvar_head.visit(&join(p, "logvar_head"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.backbone.visit_mut(&join(p, "backbone"), f);
        self.logvar_head.visit_mut(&join(p, "logvar_head"), f);
    }

    fn visit_buffers(&self, p: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        self.backbone.visit_buffers(&join(p, "backbone"), f);
    }

    fn visit_buffers_mut(&mut self, p: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        self.backbone.visit_buffers_mut(&join(p, "backbone"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Weight of the uncertainty term; 0 leaves only the same-time term.
    pub uncertainty_weight: f64,
    pub init_from_teacher: bool,
    pub seed: u64,
    pub crop_size: usize,
    pub samples_per_scene: usize,
    pub step_gamma: f64,
    pub step_fraction: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 50,
            batch_size: 10,
            lambda: 1.0,
            uncertainty_weight: 1.0,
            init_from_teacher: true,
            seed: 0,
            crop_size: 48,
            samples_per_scene: 48,
            step_gamma: 0.5,
            step_fraction: 0.4,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive, got {}", self.lr);
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.samples_per_scene >= 1, Config, "samples_per_scene must be >= 1");
        ensure!(self.lambda >= 0.0, Config, "lambda must be >= 0, got {}", self.lambda);
        ensure!(self.uncertainty_weight >= 0.0, Config, "uncertainty_weight must be >= 0");
        ensure!(
            self.crop_size > 0 && self.crop_size.is_multiple_of(crate::model::DOWNSAMPLE),
            Config,
            "crop_size {} must be a positive multiple of {}",
            self.crop_size,
            crate::model::DOWNSAMPLE
        );
        self.schedule().validate()
    }

    pub fn schedule(&self) -> StepLr {
        StepLr::for_run(self.lr, self.step_gamma, self.step_fraction, self.epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistillEpochLog {
    pub epoch: usize,
    pub uncertainty: f64,
    pub consistency: f64,
    pub total: f64,
    pub mean_logvar: f64,
    /// Fraction of pixels where the log-variance clamp was active.
    pub clamped: f64,
    pub lr: f64,
}

pub fn log_csv(log: &[DistillEpochLog]) -> String {
    let mut out = String::from("epoch,L_u,L_same,L_total,mean_s,clamped,lr\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.6},{:.3e}\n",
            e.epoch, e.uncertainty, e.consistency, e.total, e.mean_logvar, e.clamped, e.lr
        ));
    }
    out
}

/// One distillation item: the same crop of two timestamps of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistillItem {
    pub scene: usize,
    /// Teacher target time.
    pub m: usize,
    /// Cross-time student input.
    pub n: usize,
    pub origin: (usize, usize),
}

/// Teacher features of every timestamp of every scene, (D, H, W) each.
pub fn teacher_targets<T: Scalar>(teacher: &Teacher<T>, scenes: &[Scene<T>]) -> Result<Vec<Vec<Array3<T>>>> {
    scenes
        .iter()
        .map(|sc| {
            sc.iter()
                .map(|img| Ok(teacher.image_features(img)?.values.index_axis_move(Axis(0), 0)))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

pub fn sample_distill_item<T: Scalar, R: Rng>(scenes: &[Scene<T>], scene: usize, crop: usize, rng: &mut R) -> Result<DistillItem> {
    let sc = &scenes[scene];
    ensure!(sc.len() >= 2, Input, "scene {scene} needs a second timestamp for distillation");
    let (h, w) = (sc[0].height(), sc[0].width());
    ensure!(h >= crop && w >= crop, Parameter, "scene {h}x{w} smaller than crop {crop}");
    let m = rng.random_range(0..sc.len());
    let n = (m + rng.random_range(1..sc.len())) % sc.len();
    let origin = (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop));
    Ok(DistillItem { scene, m, n, origin })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DistillStats {
    pub uncertainty: f64,
    pub consistency: f64,
    pub total: f64,
    pub mean_logvar: f64,
    pub clamped: f64,
}

/// Forward and backward on one batch; gradients accumulate into `grads`.
pub fn batch_gradients<T: Scalar>(
    student: &Student<T>,
    scenes: &[Scene<T>],
    targets: &[Vec<Array3<T>>],
    items: &[DistillItem],
    cfg: &DistillConfig,
    grads: &mut Student<T>,
) -> Result<(DistillStats, ResUnetCache<T>)> {
    ensure!(!items.is_empty(), Input, "empty batch");
    let c = cfg.crop_size;
    let crop = |a: &Array3<T>, o: (usize, usize)| a.slice(s![.., o.0..o.0 + c, o.1..o.1 + c]).to_owned();
    let xn: Vec<Array3<T>> = items.iter().map(|it| crop(&scenes[it.scene][it.n].data, it.origin)).collect();
    let xm: Vec<Array3<T>> = items.iter().map(|it| crop(&scenes[it.scene][it.m].data, it.origin)).collect();
    let ym: Vec<Array3<T>> = items.iter().map(|it| crop(&targets[it.scene][it.m], it.origin)).collect();
    let views = |v: &[Array3<T>]| -> Result<Array4<T>> {
        stack(Axis(0), &v.iter().map(|a| a.view()).collect::<Vec<_>>()).map_err(|e| Error::Shape(e.to_string()))
    };
    let x = concatenate(Axis(0), &[views(&xn)?.view(), views(&xm)?.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let y = views(&ym)?;
    let b = items.len();
    let (out, cache) = student.forward(&x, Mode::Train)?;
    let mu_n = out.mu.slice(s![..b, .., .., ..]).to_owned();
    let mu_m = out.mu.slice(s![b.., .., .., ..]).to_owned();
    let s_n = out.logvar.slice(s![..b, .., ..]).to_owned();
    let lambda = T::lit(cfg.lambda);
    let (loss, g) = distill_total(&y, &mu_n, &s_n, &y, &mu_m, lambda)?;
    let wu = T::lit(cfg.uncertainty_weight);
    let total = wu * loss.uncertainty + lambda * loss.consistency;
    if !total.is_finite() {
        return Err(Error::Diverged(format!("non-finite distillation loss (L_u {}, L_same {})", loss.uncertainty, loss.consistency)));
    }
    let d_mu = concatenate(Axis(0), &[(g.mu_cross * wu).view(), g.mu_same.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let mut d_s = Array3::<T>::zeros(out.logvar.dim());
    d_s.slice_mut(s![..b, .., ..]).assign(&(g.s * wu));
    student.backward(&cache, &out, &d_mu, &d_s, grads);
    let lim = T::lit(LOGVAR_LIMIT);
    let clamped = cache.logvar_pre.iter().filter(|&&p| p < -lim || p > lim).count();
    let stats = DistillStats {
        uncertainty: loss.uncertainty.as_f64(),
        consistency: loss.consistency.as_f64(),
        total: total.as_f64(),
        mean_logvar: s_n.mean().map_or(0.0, |v| v.as_f64()),
        clamped: clamped as f64 / cache.logvar_pre.len() as f64,
    };
    Ok((stats, cache.backbone))
}

#[derive(Debug, Clone)]
pub struct DistillRun<T> {
    pub student: Student<T>,
    pub log: Vec<DistillEpochLog>,
}

pub fn distill<T: Scalar>(
    teacher: &Teacher<T>,
    scenes: &[Scene<T>],
    cfg: &DistillConfig,
    progress: &mut dyn FnMut(&DistillEpochLog),
) -> Result<DistillRun<T>> {
    cfg.validate()?;
    ensure!(!scenes.is_empty(), Input, "distillation needs at least one scene");
    for (k, s) in scenes.iter().enumerate() {
        ensure!(s.len() >= 2, Input, "scene {k} has {} image(s); distillation needs two timestamps", s.len());
        ensure!(
            s[0].bands() == teacher.config().in_bands,
            Shape,
            "scene {k} has {} bands, teacher expects {}",
            s[0].bands(),
            teacher.config().in_bands
        );
    }
    let mut student = if cfg.init_from_teacher {
        Student::from_teacher(teacher)
    } else {
        Student::new(&ModelConfig { seed: teacher.config().seed.wrapping_add(1), ..teacher.config().clone() })?
    };
    let targets = teacher_targets(teacher, scenes)?;
    let schedule = cfg.schedule();
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..scenes.len()).flat_map(|s| std::iter::repeat_n(s, cfg.samples_per_scene)).collect();
    let batches = order.len().div_ceil(cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut epoch_rng);
        let mut sums = DistillStats::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = seed_for(cfg.seed, epoch as u64, bi as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let mut items = chunk
                .iter()
                .map(|&s| sample_distill_item(scenes, s, cfg.crop_size, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            if (epoch * batches + bi) % 2 == 1 {
                for it in &mut items {
                    std::mem::swap(&mut it.m, &mut it.n);
                }
            }
            let mut grads = zeros_like(&student);
            let (stats, cache) = batch_gradients(&student, scenes, &targets, &items, cfg, &mut grads)
                .and_then(|r| adam.step(&mut student, &grads, lr).map(|_| r))
                .map_err(|e| match e {
                    Error::Diverged(msg) => {
                        Error::Diverged(format!("{msg}; epoch {epoch}, batch {bi}, batch seed {batch_seed}"))
                    }
                    other => other,
                })?;
            student.backbone.update_running_stats(&cache);
            sums.uncertainty += stats.uncertainty;
            sums.consistency += stats.consistency;
            sums.total += stats.total;
            sums.mean_logvar += stats.mean_logvar;
            sums.clamped += stats.clamped;
        }
        let n = batches as f64;
        let entry = DistillEpochLog {
            epoch,
            uncertainty: sums.uncertainty / n,
            consistency: sums.consistency / n,
            total: sums.total / n,
            mean_logvar: sums.mean_logvar / n,
            clamped: sums.clamped / n,
            lr,
        };
        log::info!(
            "distill epoch {epoch}: L_u {:.4} L_same {:.4} mean s {:.3} lr {lr:.2e}",
            entry.uncertainty,
            entry.consistency,
            entry.mean_logvar
        );
        progress(&entry);
        log.push(entry);
    }
    Ok(DistillRun { student, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SynthConfig};
    use crate::quantizer::QuantizerConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig { in_bands: 3, feature_dim: 8, stem_channels: 6, encoder_channels: vec![6, 8, 8], seed: 5 }
    }

    fn setup() -> (Teacher<f64>, Vec<Scene<f64>>) {
        let q = QuantizerConfig { codebook_size: 8, ..QuantizerConfig::default() };
        let teacher = Teacher::new(&tiny_model(), &q).unwrap();
        let cfg = SynthConfig { size: 24, bands: 3, n_timestamps: 3, ..SynthConfig::default() };
        let scenes = (0..2).map(|k| synth_scene::<f64>(k, &cfg).unwrap().timestamps).collect();
        (teacher, scenes)
    }

    fn tiny_cfg() -> DistillConfig {
        DistillConfig { epochs: 2, batch_size: 2, crop_size: 16, samples_per_scene: 2, ..DistillConfig::default() }
    }

    #[test]
    fn teacher_initialized_student_starts_consistent() {
        let (teacher, scenes) = setup();
        let student = Student::from_teacher(&teacher);
        let img = scenes[0][1].data.clone().insert_axis(Axis(0));
        let y = teacher.features(&img).unwrap().values;
        let (mu, s) = student.infer(&img).unwrap();
        assert!(y.iter().zip(mu.values.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (teacher, scenes) = setup();
        let mut student = Student::from_teacher(&teacher);
        student.logvar_head.weight.mapv_inplace(|_| 0.3);
        let targets = teacher_targets(&teacher, &scenes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items: Vec<_> = (0..2).map(|s| sample_distill_item(&scenes, s, 16, &mut rng).unwrap()).collect();
        let cfg = DistillConfig { lambda: 0.7, ..tiny_cfg() };
        let loss_at = |st: &Student<f64>| {
            let mut g = zeros_like(st);
            batch_gradients(st, &scenes, &targets, &items, &cfg, &mut g).unwrap().0.total
        };
        let mut grads = zeros_like(&student);
        batch_gradients(&student, &scenes, &targets, &items, &cfg, &mut grads).unwrap();
        let probes: [(&str, fn(&mut Student<f64>) -> &mut f64); 3] = [
            ("head", |s| &mut s.logvar_head.weight[[0, 2, 0, 0]]),
            ("linear", |s| &mut s.backbone.linear.weight[[3, 1, 0, 0]]),
            ("enc2", |s| &mut s.backbone.encoder[1].conv1.weight[[1, 0, 1, 2]]),
        ];
        for (name, probe) in probes {
            let mut g = grads.clone();
            let analytic = *probe(&mut g);
            let h = 1e-5;
            let mut plus = student.clone();
            *probe(&mut plus) += h;
            let mut minus = student.clone();
            *probe(&mut minus) -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!((analytic - numeric).abs() <= 1e-4 * (1.0 + numeric.abs()), "{name}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn teacher_is_untouched_and_runs_repeat() {
        let (teacher, scenes) = setup();
        let before = teacher.to_bytes(serde_json::Value::Null).unwrap();
        let a = distill(&teacher, &scenes, &tiny_cfg(), &mut |_| {}).unwrap();
        let b = distill(&teacher, &scenes, &tiny_cfg(), &mut |_| {}).unwrap();
        assert_eq!(before, teacher.to_bytes(serde_json::Value::Null).unwrap());
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|e| e.total.is_finite()));
    }

    #[test]
    fn single_timestamp_scene_is_rejected() {
        let (teacher, mut scenes) = setup();
        scenes[1].truncate(1);
        assert!(matches!(distill(&teacher, &scenes, &tiny_cfg(), &mut |_| {}), Err(Error::Input(_))));
    }

    #[test]
    fn student_checkpoint_round_trip_and_kind_check() {
        let (teacher, _) = setup();
        let s = Student::from_teacher(&teacher);
        let bytes = s.to_bytes(serde_json::json!({"lambda": 1.0})).unwrap();
        let back = Student::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(s.collect_params(), back.collect_params());
        assert!(Teacher::<f64>::from_bytes(&bytes).is_err());
        assert!(Student::<f64>::from_bytes(&teacher.to_bytes(serde_json::Value::Null).unwrap()).is_err());
    }

    #[test]
    fn logvar_clamp_blocks_gradient() {
        let (teacher, scenes) = setup();
        let mut student = Student::from_teacher(&teacher);
        student.logvar_head.bias[0] = 50.0;
        let targets = teacher_targets(&teacher, &scenes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let items = vec![sample_distill_item(&scenes, 0, 16, &mut rng).unwrap()];
        let mut g = zeros_like(&student);
        let (stats, _) = batch_gradients(&student, &scenes, &targets, &items, &tiny_cfg(), &mut g).unwrap();
        assert_eq!(stats.clamped, 1.0);
        assert_eq!(stats.mean_logvar, LOGVAR_LIMIT);
        assert_eq!(g.logvar_head.bias[0], 0.0);
    }
}
