//! Change maps from a trained teacher or student checkpoint.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::changemap::{change_product, intensity, ChangeProduct, ThresholdMethod};
use crate::checkpoint::{self, ModelKind};
use crate::data::{check_pair, save_mask, save_raster, write_pgm, RasterImage};
use crate::distill::Student;
use crate::error::{ensure, Result};
use crate::metrics::{confusion, Confusion};
use crate::model::{FeatureMap, ModelConfig};
use crate::pretrain::Teacher;
use crate::Scalar;

#[derive(Debug, Clone)]
pub enum Detector<T> {
    Teacher(Teacher<T>),
    Student(Student<T>),
}

impl<T: Scalar> Detector<T> {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, _) = checkpoint::decode_header(bytes)?;
        Ok(match header.kind {
            ModelKind::Teacher => Self::Teacher(Teacher::from_bytes(bytes)?),
            ModelKind::Student => Self::Student(Student::from_bytes(bytes)?),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Teacher(_) => ModelKind::Teacher,
            Self::Student(_) => ModelKind::Student,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Teacher(t) => t.config(),
            Self::Student(s) => s.config(),
        }
    }

    /// Gating is on by default only when a log-variance map exists.
    pub fn default_gating(&self) -> bool {
        matches!(self, Self::Student(_))
    }

    /// Eval-mode unit features and, for a student, the (H, W) log-variance.
    pub fn features(&self, image: &RasterImage<T>) -> Result<(FeatureMap<T>, Option<Array2<f64>>)> {
        ensure!(
            image.bands() == self.config().in_bands,
            Shape,
            "image has {} bands, model expects {}",
            image.bands(),
            self.config().in_bands
        );
        match self {
            Self::Teacher(t) => Ok((t.image_features(image)?, None)),
            Self::Student(s) => {
                let (mu, lv) = s.image_infer(image)?;
                Ok((mu, Some(lv.index_axis(Axis(0), 0).mapv(|v| v.as_f64()))))
            }
        }
    }
}

/// Intensity, optional gating and threshold for one bi-temporal pair. A
/// student contributes the mean of the two log-variance maps.
pub fn make_change_product<T: Scalar>(
    detector: &Detector<T>,
    img_m: &RasterImage<T>,
    img_n: &RasterImage<T>,
    method: ThresholdMethod,
    gating: bool,
) -> Result<ChangeProduct> {
    check_pair(img_m, img_n)?;
    let (fm, lm) = detector.features(img_m)?;
    let (fn_, ln) = detector.features(img_n)?;
    let map = intensity(&fm, &fn_)?.index_axis_move(Axis(0), 0);
    let logvar = match (lm, ln) {
        (Some(a), Some(b)) => Some((a + b) * 0.5),
        _ => None,
    };
    change_product(map, logvar, method, gating)
}

/// Confusion of a change product against a reference map.
pub fn evaluate_product(product: &ChangeProduct, truth: &Array2<bool>) -> Result<Confusion> {
    confusion(product.binary.view(), truth.view(), None)
}

/// Writes `intensity.pxr`, `binary.pxr`, `binary.pgm`, `report.txt` and, when
/// present, `gated.pxr` and `logvar.pxr`.
pub fn save_product(product: &ChangeProduct, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let single = |a: &Array2<f64>| RasterImage::new(a.clone().insert_axis(Axis(0)));
    save_raster(&single(&product.intensity), &dir.join("intensity.pxr"))?;
    if let Some(g) = &product.gated {
        save_raster(&single(g), &dir.join("gated.pxr"))?;
    }
    if let Some(lv) = &product.logvar {
        save_raster(&single(lv), &dir.join("logvar.pxr"))?;
    }
    save_mask(product.binary.view(), &dir.join("binary.pxr"))?;
    write_pgm(product.binary.mapv(|b| if b { 255u8 } else { 0 }).view(), &dir.join("binary.pgm"))?;
    fs::write(dir.join("report.txt"), product.report())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_mask, load_raster, synth_scene, SynthConfig};
    use crate::quantizer::QuantizerConfig;

    fn teacher() -> Teacher<f64> {
        let m = ModelConfig { in_bands: 3, feature_dim: 8, stem_channels: 6, encoder_channels: vec![6, 8, 8], seed: 2 };
        Teacher::new(&m, &QuantizerConfig { codebook_size: 8, ..QuantizerConfig::default() }).unwrap()
    }

    fn scene() -> crate::data::SyntheticScene<f64> {
        synth_scene(3, &SynthConfig { size: 24, bands: 3, n_timestamps: 4, ..SynthConfig::default() }).unwrap()
    }

    #[test]
    fn detector_round_trips_both_kinds() {
        let t = teacher();
        let d = Detector::<f64>::from_bytes(&t.to_bytes(serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(d.kind(), ModelKind::Teacher);
        assert!(!d.default_gating());
        let s = Student::from_teacher(&t);
        let d = Detector::<f64>::from_bytes(&s.to_bytes(serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(d.kind(), ModelKind::Student);
        assert!(d.default_gating());
    }

    #[test]
    fn identical_images_give_zero_intensity() {
        let sc = scene();
        let d = Detector::Teacher(teacher());
        let p = make_change_product(&d, &sc.timestamps[0], &sc.timestamps[0], ThresholdMethod::Fixed(0.5), false).unwrap();
        assert!(p.intensity.iter().all(|&v| v.abs() < 1e-9 || v == 1.0));
        assert!(p.binary.iter().filter(|&&b| b).count() <= p.intensity.iter().filter(|&&v| v == 1.0).count());
    }

    #[test]
    fn teacher_cannot_gate_and_mismatched_pairs_fail() {
        let sc = scene();
        let d = Detector::Teacher(teacher());
        assert!(make_change_product(&d, &sc.timestamps[0], &sc.timestamps[1], ThresholdMethod::Rosin, true).is_err());
        let small = RasterImage::new(sc.timestamps[0].data.slice(ndarray::s![.., ..16, ..16]).to_owned());
        assert!(make_change_product(&d, &sc.timestamps[0], &small, ThresholdMethod::Rosin, false).is_err());
    }

    #[test]
    fn student_product_is_saved_and_evaluated() {
        let sc = scene();
        let d = Detector::Student(Student::from_teacher(&teacher()));
        let p = make_change_product(&d, &sc.timestamps[sc.pre_index], &sc.timestamps[sc.post_index], ThresholdMethod::Otsu, true)
            .unwrap();
        assert!(p.logvar.is_some() && p.gated.is_some());
        let c = evaluate_product(&p, &sc.change_mask).unwrap();
        assert_eq!(c.total(), 24 * 24);
        let dir = tempfile::tempdir().unwrap();
        save_product(&p, dir.path()).unwrap();
        assert_eq!(load_mask(&dir.path().join("binary.pgm")).unwrap(), p.binary);
        assert_eq!(load_mask(&dir.path().join("binary.pxr")).unwrap(), p.binary);
        let back = load_raster::<f64>(&dir.path().join("intensity.pxr")).unwrap();
        assert_eq!(back.data.index_axis(Axis(0), 0), p.intensity);
        assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("gating: on"));
    }
}
