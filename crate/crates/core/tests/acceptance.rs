//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without the libtest harness so the report is
//! always printed.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::Axis;
use pixcd::changemap::{change_product, intensity, ThresholdMethod};
use pixcd::data::{synth_scene, SynthConfig, SyntheticScene};
use pixcd::distill::{distill, DistillConfig};
use pixcd::metrics::{confusion, scores, Confusion};
use pixcd::model::ModelConfig;
use pixcd::nn::Parameterized;
use pixcd::pretrain::{feature_margin, pretrain, PretrainConfig, Teacher};
use pixcd::quantizer::QuantizerConfig;
use pixcd::selftest::{self, Check};

const GRADIENT_BUDGET_S: f64 = 10.0;
const THRESHOLD_CASES: usize = 1000;
const THRESHOLD_BUDGET_S: f64 = 30.0;
const METRIC_CASES: usize = 500;
const E2E_BUDGET_S: f64 = 20.0 * 60.0;
const MIN_MARGIN: f64 = 0.2;
const MIN_TEACHER_KAPPA: f64 = 0.3;
const MIN_LOGVAR_GAP: f64 = 0.3;
const REFERENCE_PARAMS: f64 = 4.216e6;
const PARAM_TOLERANCE: f64 = 0.25;

struct Line {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_check(id: u8, c: Check, budget: Option<f64>) -> Line {
    let within = budget.is_none_or(|b| c.seconds < b);
    let budget_note = budget.map(|b| format!(", budget {b:.0}s")).unwrap_or_default();
    Line {
        id,
        name: c.name,
        passed: c.passed && within,
        detail: format!("{} ({:.2}s{budget_note})", c.detail, c.seconds),
    }
}

fn pooled_kappa(teacher: &Teacher<f32>, scenes: &[SyntheticScene<f32>], method: ThresholdMethod) -> f64 {
    let mut c = Confusion::default();
    for s in scenes {
        let fa = teacher.image_features(&s.timestamps[s.pre_index]).unwrap();
        let fb = teacher.image_features(&s.timestamps[s.post_index]).unwrap();
        let map = intensity(&fa, &fb).unwrap().index_axis_move(Axis(0), 0);
        let p = change_product(map, None, method, false).unwrap();
        c = c.merge(&confusion(p.binary.view(), s.change_mask.view(), None).unwrap());
    }
    scores(&c).unwrap().kappa
}

fn end_to_end() -> Line {
    let t0 = Instant::now();
    let synth = SynthConfig {
        size: 64,
        bands: 4,
        n_timestamps: 6,
        change_fraction: 0.1,
        season_fraction: 0.2,
        ..SynthConfig::default()
    };
    let scenes: Vec<_> = (0..8).map(|k| synth_scene::<f32>(k, &synth).unwrap()).collect();
    let train: Vec<_> = scenes[..6].iter().map(|s| s.timestamps.clone()).collect();
    let held_out: Vec<_> = scenes[6..].iter().map(|s| s.timestamps.clone()).collect();
    let model = ModelConfig { in_bands: 4, feature_dim: 16, stem_channels: 16, encoder_channels: vec![16, 32, 64], seed: 0 };
    let quantizer = QuantizerConfig { codebook_size: 256, ..QuantizerConfig::default() };
    let pcfg = PretrainConfig::default();
    let teacher = pretrain(&train, &model, &quantizer, &pcfg, &mut |_| {}).unwrap().teacher;

    let margin = feature_margin(&teacher, &held_out, &pcfg.view, 8, 64, 7).unwrap().margin;
    let rosin = pooled_kappa(&teacher, &scenes, ThresholdMethod::Rosin);
    let otsu = pooled_kappa(&teacher, &scenes, ThresholdMethod::Otsu);

    let student = distill(&teacher, &train, &DistillConfig::default(), &mut |_| {}).unwrap().student;
    let (mut season, mut ns, mut stable, mut nt) = (0.0f64, 0usize, 0.0f64, 0usize);
    for s in &scenes {
        for img in &s.timestamps {
            let (_, lv) = student.image_infer(img).unwrap();
            for ((&v, &sea), &chg) in lv.index_axis(Axis(0), 0).iter().zip(&s.season_mask).zip(&s.change_mask) {
                if sea {
                    season += v as f64;
                    ns += 1;
                } else if !chg {
                    stable += v as f64;
                    nt += 1;
                }
            }
        }
    }
    let gap = season / ns as f64 - stable / nt as f64;
    let secs = t0.elapsed().as_secs_f64();

    let parts = [
        (margin >= MIN_MARGIN, format!("margin {margin:.3} >= {MIN_MARGIN}")),
        (rosin > MIN_TEACHER_KAPPA, format!("rosin kappa {rosin:.3} > {MIN_TEACHER_KAPPA}")),
        (gap >= MIN_LOGVAR_GAP, format!("logvar gap {gap:.3} >= {MIN_LOGVAR_GAP}")),
        (rosin >= otsu, format!("rosin {rosin:.3} >= otsu {otsu:.3}")),
        (secs < E2E_BUDGET_S, format!("{secs:.0}s < {E2E_BUDGET_S:.0}s")),
    ];
    let detail = parts
        .iter()
        .map(|(ok, d)| format!("[{}] {d}", if *ok { "ok" } else { "x" }))
        .collect::<Vec<_>>()
        .join("; ");
    Line { id: 7, name: "end-to-end synthetic run", passed: parts.iter().all(|p| p.0), detail }
}

fn parameter_budget() -> Line {
    // Backbone plus codebook, projections included.
    let teacher = Teacher::<f32>::new(&ModelConfig::default(), &QuantizerConfig::default()).unwrap();
    let n = teacher.parameter_count() as f64;
    let rel = (n - REFERENCE_PARAMS) / REFERENCE_PARAMS;
    Line {
        id: 8,
        name: "default model size",
        passed: rel.abs() <= PARAM_TOLERANCE,
        detail: format!("{n} parameters, {:+.1}% vs {REFERENCE_PARAMS} (limit ±{:.0}%)", rel * 100.0, PARAM_TOLERANCE * 100.0),
    }
}

fn main() -> ExitCode {
    let skip_e2e = std::env::var_os("PIXCD_SKIP_E2E").is_some();
    let mut lines = vec![
        from_check(1, selftest::loss_gradients(), Some(GRADIENT_BUDGET_S)),
        from_check(2, selftest::closed_form_losses(), None),
        from_check(3, selftest::threshold_oracles(THRESHOLD_CASES, 2024), Some(THRESHOLD_BUDGET_S)),
        from_check(4, selftest::metric_oracle(METRIC_CASES, 7), None),
        from_check(5, selftest::equivariance(), None),
        from_check(6, selftest::quantizer_suite(), None),
    ];
    if skip_e2e {
        lines.push(Line { id: 7, name: "end-to-end synthetic run", passed: false, detail: "skipped (PIXCD_SKIP_E2E)".into() });
    } else {
        lines.push(end_to_end());
    }
    lines.push(parameter_budget());

    for l in &lines {
        println!("criterion {} {} {}: {}", l.id, if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("acceptance: {}/{} passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
