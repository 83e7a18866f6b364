//! Small end-to-end runs through the public API.

use pixcd::changemap::ThresholdMethod;
use pixcd::data::{load_scene_timestamps, save_scene, synth_scene, SynthConfig};
use pixcd::distill::{distill, DistillConfig};
use pixcd::infer::{evaluate_product, make_change_product, Detector};
use pixcd::model::ModelConfig;
use pixcd::pretrain::{pretrain, PretrainConfig};
use pixcd::quantizer::QuantizerConfig;
use pixcd::views::ViewConfig;
use pixcd::{Student, StudentF64, Teacher, TeacherF64};
use proptest::prelude::*;

fn tiny_model() -> (ModelConfig, QuantizerConfig) {
    (
        ModelConfig { in_bands: 3, feature_dim: 8, stem_channels: 8, encoder_channels: vec![8, 8, 8], seed: 1 },
        QuantizerConfig { codebook_size: 16, ..QuantizerConfig::default() },
    )
}

fn tiny_pretrain() -> PretrainConfig {
    PretrainConfig {
        epochs: 2,
        batch_size: 2,
        samples_per_scene: 1,
        view: ViewConfig { crop_size: 16, max_offset: 4, flips: true },
        ..PretrainConfig::default()
    }
}

#[test]
fn scene_files_feed_training_and_inference() {
    let synth = SynthConfig { size: 32, bands: 3, n_timestamps: 3, ..SynthConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut scenes = Vec::new();
    for k in 0..2 {
        let sc = synth_scene::<f64>(k, &synth).unwrap();
        let path = dir.path().join(format!("scene_{k}"));
        save_scene(&sc, &path).unwrap();
        scenes.push(load_scene_timestamps::<f64>(&path).unwrap());
        assert_eq!(scenes[k as usize].len(), 3);
    }

    let (model, quantizer) = tiny_model();
    let run = pretrain(&scenes, &model, &quantizer, &tiny_pretrain(), &mut |_| {}).unwrap();
    assert_eq!(run.log.len(), 2);
    assert!(run.log.iter().all(|e| e.total.is_finite()));

    let dcfg = DistillConfig { epochs: 1, batch_size: 2, samples_per_scene: 1, crop_size: 16, ..DistillConfig::default() };
    let student = distill(&run.teacher, &scenes, &dcfg, &mut |_| {}).unwrap().student;

    let ckpt = dir.path().join("student.ckpt");
    student.save(&ckpt, serde_json::json!({"note": "tiny"})).unwrap();
    let det = Detector::<f64>::load(&ckpt).unwrap();
    let sc = synth_scene::<f64>(5, &synth).unwrap();
    let p = make_change_product(&det, &sc.timestamps[sc.pre_index], &sc.timestamps[sc.post_index], ThresholdMethod::Rosin, true)
        .unwrap();
    assert!(p.gated.is_some());
    assert_eq!(evaluate_product(&p, &sc.change_mask).unwrap().total(), 32 * 32);
}

#[test]
fn checkpoints_cross_precision() {
    let (model, quantizer) = tiny_model();
    let t64 = TeacherF64::new(&model, &quantizer).unwrap();
    let t32 = Teacher::from_bytes(&t64.to_bytes(serde_json::Value::Null).unwrap()).unwrap();
    let synth = SynthConfig { size: 16, bands: 3, n_timestamps: 2, ..SynthConfig::default() };
    let f32_features = t32.image_features(&synth_scene::<f32>(0, &synth).unwrap().timestamps[0]).unwrap();
    let f64_features = t64.image_features(&synth_scene::<f64>(0, &synth).unwrap().timestamps[0]).unwrap();
    let worst = f32_features
        .values
        .iter()
        .zip(&f64_features.values)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "f32/f64 feature gap {worst}");

    let s32 = Student::from_teacher(&t32);
    let s64 = StudentF64::from_bytes(&s32.to_bytes(serde_json::Value::Null).unwrap()).unwrap();
    assert!(Teacher::from_bytes(&s64.to_bytes(serde_json::Value::Null).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binary_map_is_intensity_above_threshold(seed in 0u64..1000, otsu in any::<bool>()) {
        let (model, quantizer) = tiny_model();
        let det = Detector::Teacher(TeacherF64::new(&ModelConfig { seed, ..model }, &quantizer).unwrap());
        let sc = synth_scene::<f64>(seed, &SynthConfig { size: 16, bands: 3, n_timestamps: 2, ..SynthConfig::default() }).unwrap();
        let method = if otsu { ThresholdMethod::Otsu } else { ThresholdMethod::Rosin };
        let p = make_change_product(&det, &sc.timestamps[0], &sc.timestamps[1], method, false).unwrap();
        for (&v, &b) in p.intensity.iter().zip(&p.binary) {
            prop_assert!((0.0..=2.0).contains(&v));
            prop_assert_eq!(b, v > p.threshold);
        }
    }
}
