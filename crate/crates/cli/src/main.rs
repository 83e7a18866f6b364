//! `pixcd` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use pixcd::changemap::ThresholdMethod;
use pixcd::data::{load_mask, load_scene_timestamps, save_scene, synth_scene, SynthConfig};
use pixcd::distill::{distill, DistillConfig};
use pixcd::infer::{evaluate_product, make_change_product, save_product};
use pixcd::metrics::{confusion, csv_header, csv_row, scores, table, Confusion, Scores};
use pixcd::model::ModelConfig;
use pixcd::nn::Parameterized;
use pixcd::pretrain::{pretrain, PretrainConfig};
use pixcd::quantizer::QuantizerConfig;
use pixcd::{Detector, Image};

/// Bad invocation or configuration; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "pixcd",
    version,
    about = "Self-supervised pixel-wise change detection",
    after_help = "Config keys can be overridden with --section.key value, e.g. --train.epochs 5 --model.feature_dim 16."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic multi-temporal scenes with change and seasonal masks.
    Synth(SynthArgs),
    /// Contrastive pretraining of the teacher.
    Pretrain(PretrainArgs),
    /// Train the uncertainty-aware student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Change map for one image pair.
    Infer(InferArgs),
    /// Metrics of predicted maps against references.
    Evaluate(EvaluateArgs),
    /// Run the built-in oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    /// Scene k uses seed + k.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// A scene directory (t0.pxr, t1.pxr, ...) or a directory of them.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Gating {
    /// On for a student, off for a teacher.
    Auto,
    On,
    Off,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Teacher or student checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image_m: PathBuf,
    #[arg(long)]
    image_n: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// rosin, otsu, or fixed:<value>.
    #[arg(long, default_value = "rosin")]
    method: ThresholdMethod,
    #[arg(long, value_enum, default_value_t = Gating::Auto)]
    gating: Gating,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predicted binary map (PGM or native raster).
    #[arg(long, requires = "gt", conflicts_with_all = ["model", "data"])]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Optional evaluation mask; only true pixels are scored.
    #[arg(long, requires = "pred")]
    mask: Option<PathBuf>,
    /// Checkpoint to run over labelled scenes instead of a single map.
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    /// Scene directories holding change_mask.pxr.
    #[arg(long, requires = "model")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "rosin")]
    method: ThresholdMethod,
    #[arg(long, value_enum, default_value_t = Gating::Auto)]
    gating: Gating,
    #[arg(long, default_value = "pred")]
    name: String,
    /// Writes metrics.csv and summary.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the JSON summary to stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SynthFile {
    synth: SynthConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainFile {
    model: ModelConfig,
    quantizer: QuantizerConfig,
    train: PretrainConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct DistillFile {
    train: DistillConfig,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    config: serde_json::Value,
    seed: u64,
    version: String,
    output_dir: &'a Path,
    args: Vec<String>,
}

/// Per-scene metadata written by `synth`.
#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    pre_index: usize,
    post_index: usize,
    change_time: usize,
}

fn version() -> String {
    match option_env!("PIXCD_GIT_DESCRIBE") {
        Some(g) => format!("v{}-{g}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn invalid(e: pixcd::Error) -> UsageError {
    UsageError(format!("invalid config: {e}"))
}

fn write_manifest(
    command: &str,
    out: &Path,
    config_path: Option<&Path>,
    config: serde_json::Value,
    seed: u64,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest {
        command,
        config_path,
        config,
        seed,
        version: version(),
        output_dir: out,
        args: std::env::args().collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `root` itself when it holds `t0.pxr`, otherwise its sorted subdirectories that do.
fn scene_dirs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if root.join("t0.pxr").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("t0.pxr").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("{}: no scene directories (expected t0.pxr)", root.display());
    }
    Ok(dirs)
}

fn load_scenes(root: &Path) -> anyhow::Result<Vec<Vec<Image>>> {
    scene_dirs(root)?
        .iter()
        .map(|d| load_scene_timestamps(d).with_context(|| format!("loading {}", d.display())))
        .collect()
}

fn run_synth(a: &SynthArgs, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let (file, resolved) = config::resolve::<SynthFile>(a.config.as_deref(), overrides)?;
    file.synth.validate().map_err(invalid)?;
    write_manifest("synth", &a.out, a.config.as_deref(), json!(resolved), a.seed)?;
    for k in 0..a.scenes {
        let seed = a.seed + k as u64;
        let scene = synth_scene::<f32>(seed, &file.synth)?;
        let dir = a.out.join(format!("scene_{k:03}"));
        save_scene(&scene, &dir)?;
        let meta = SceneMeta { seed, pre_index: scene.pre_index, post_index: scene.post_index, change_time: scene.change_time };
        write_json(&dir.join("meta.json"), &meta)?;
    }
    write_json(&a.out.join("summary.json"), &json!({ "scenes": a.scenes, "synth": file.synth }))?;
    println!("wrote {} scene(s) to {}", a.scenes, a.out.display());
    Ok(())
}

fn run_pretrain(a: &PretrainArgs, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let (mut file, _) = config::resolve::<PretrainFile>(a.config.as_deref(), overrides)?;
    let scenes = load_scenes(&a.data)?;
    file.model.in_bands = scenes[0][0].bands();
    file.model.validate().map_err(invalid)?;
    file.quantizer.validate(file.model.feature_dim).map_err(invalid)?;
    file.train.validate().map_err(invalid)?;
    write_manifest("pretrain", &a.out, a.config.as_deref(), json!(file), file.train.seed)?;
    let t0 = Instant::now();
    let run = pretrain(&scenes, &file.model, &file.quantizer, &file.train, &mut |_| {})?;
    let ckpt = a.out.join("teacher.ckpt");
    run.teacher.save(&ckpt, json!(file.train))?;
    std::fs::write(a.out.join("pretrain_log.csv"), pixcd::pretrain::log_csv(&run.log))?;
    let last = run.log.last().copied();
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "checkpoint": ckpt,
            "scenes": scenes.len(),
            "parameters": run.teacher.parameter_count(),
            "seconds": t0.elapsed().as_secs_f64(),
            "final": last,
        }),
    )?;
    if let Some(e) = last {
        println!(
            "teacher saved to {} (L_c {:.4}, L_d {:.4}, perplexity {:.1})",
            ckpt.display(),
            e.contrastive,
            e.codebook,
            e.perplexity
        );
    }
    Ok(())
}

fn run_distill(a: &DistillArgs, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let (file, _) = config::resolve::<DistillFile>(a.config.as_deref(), overrides)?;
    file.train.validate().map_err(invalid)?;
    let teacher = pixcd::Teacher::load(&a.teacher).with_context(|| format!("loading {}", a.teacher.display()))?;
    let scenes = load_scenes(&a.data)?;
    let snapshot = json!({ "teacher": a.teacher, "train": file.train });
    write_manifest("distill", &a.out, a.config.as_deref(), snapshot, file.train.seed)?;
    let t0 = Instant::now();
    let run = distill(&teacher, &scenes, &file.train, &mut |_| {})?;
    let ckpt = a.out.join("student.ckpt");
    run.student.save(&ckpt, json!(file.train))?;
    std::fs::write(a.out.join("distill_log.csv"), pixcd::distill::log_csv(&run.log))?;
    let last = run.log.last().copied();
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "checkpoint": ckpt,
            "scenes": scenes.len(),
            "parameters": run.student.parameter_count(),
            "seconds": t0.elapsed().as_secs_f64(),
            "final": last,
        }),
    )?;
    if let Some(e) = last {
        println!("student saved to {} (L_u {:.4}, L_same {:.4}, mean s {:.3})", ckpt.display(), e.uncertainty, e.consistency, e.mean_logvar);
    }
    Ok(())
}

fn gating_for(det: &Detector, g: Gating) -> bool {
    match g {
        Gating::Auto => det.default_gating(),
        Gating::On => true,
        Gating::Off => false,
    }
}

fn run_infer(a: &InferArgs) -> anyhow::Result<()> {
    let snapshot = json!({
        "model": a.model, "image_m": a.image_m, "image_n": a.image_n,
        "method": a.method.to_string(), "gating": format!("{:?}", a.gating).to_lowercase(),
    });
    write_manifest("infer", &a.out, None, snapshot, 0)?;
    let det = Detector::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (m, n) = pixcd::data::load_pair::<f32>(&a.image_m, &a.image_n)?;
    let product = make_change_product(&det, &m, &n, a.method, gating_for(&det, a.gating))?;
    save_product(&product, &a.out)?;
    let (h, w) = product.intensity.dim();
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "model_kind": det.kind(),
            "method": product.method.to_string(),
            "threshold": product.threshold,
            "degenerate": product.degenerate,
            "logvar_threshold": product.logvar_threshold,
            "changed_fraction": product.changed_fraction(),
            "height": h,
            "width": w,
        }),
    )?;
    print!("{}", product.report());
    Ok(())
}

fn scene_meta(dir: &Path, timestamps: usize) -> anyhow::Result<(usize, usize)> {
    let p = dir.join("meta.json");
    if !p.exists() {
        return Ok((0, timestamps - 1));
    }
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
    if meta.pre_index >= timestamps || meta.post_index >= timestamps {
        bail!("{}: pre/post index out of range for {timestamps} timestamps", p.display());
    }
    Ok((meta.pre_index, meta.post_index))
}

fn run_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let mut rows: Vec<(String, Confusion)> = Vec::new();
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let p = load_mask(pred).with_context(|| format!("loading {}", pred.display()))?;
        let g = load_mask(gt).with_context(|| format!("loading {}", gt.display()))?;
        let m = a.mask.as_deref().map(load_mask).transpose()?;
        rows.push((a.name.clone(), confusion(p.view(), g.view(), m.as_ref().map(|m| m.view()))?));
    } else if let (Some(model), Some(data)) = (&a.model, &a.data) {
        let det = Detector::load(model).with_context(|| format!("loading {}", model.display()))?;
        let gating = gating_for(&det, a.gating);
        let mut pooled = Confusion::default();
        for dir in scene_dirs(data)? {
            let ts = load_scene_timestamps::<f32>(&dir)?;
            let (pre, post) = scene_meta(&dir, ts.len())?;
            let truth = load_mask(&dir.join("change_mask.pxr")).with_context(|| format!("{}: no change_mask.pxr", dir.display()))?;
            let product = make_change_product(&det, &ts[pre], &ts[post], a.method, gating)?;
            let c = evaluate_product(&product, &truth)?;
            pooled = pooled.merge(&c);
            let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            rows.push((name, c));
        }
        rows.push(("pooled".to_string(), pooled));
    } else {
        return Err(UsageError("evaluate needs --pred/--gt or --model/--data".into()).into());
    }
    let scored: Vec<(String, Scores)> = rows.iter().map(|(n, c)| Ok((n.clone(), scores(c)?))).collect::<pixcd::Result<_>>()?;
    let summary = json!({
        "rows": rows.iter().zip(&scored).map(|((n, c), (_, s))| json!({ "name": n, "confusion": c, "scores": s })).collect::<Vec<_>>(),
        "conventions": "precision, recall and F1 are 0 when undefined; kappa is 0 when chance agreement is 1",
    });
    if let Some(out) = &a.out {
        write_manifest("evaluate", out, None, json!({ "pred": a.pred, "gt": a.gt, "model": a.model, "data": a.data }), 0)?;
        let mut csv = csv_header();
        for (n, s) in &scored {
            csv.push_str(&csv_row(n, s));
        }
        std::fs::write(out.join("metrics.csv"), csv)?;
        write_json(&out.join("summary.json"), &summary)?;
    }
    print!("{}", table(&scored));
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    }
    Ok(())
}

fn run_selftest(a: &SelftestArgs) -> anyhow::Result<bool> {
    let checks = pixcd::selftest::run_all();
    for c in &checks {
        println!("{c}");
    }
    let passed = checks.iter().all(|c| c.passed);
    if let Some(out) = &a.out {
        write_manifest("selftest", out, None, json!({}), 0)?;
        let rows: Vec<_> = checks
            .iter()
            .map(|c| json!({ "name": c.name, "passed": c.passed, "detail": c.detail, "seconds": c.seconds }))
            .collect();
        write_json(&out.join("summary.json"), &json!({ "passed": passed, "checks": rows }))?;
    }
    println!("{}", if passed { "all suites passed" } else { "some suites FAILED" });
    Ok(passed)
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<pixcd::Error>(), Some(pixcd::Error::Config(_)))
    });
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match config::extract_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let takes_overrides = matches!(cli.command, Command::Synth(_) | Command::Pretrain(_) | Command::Distill(_));
    if !overrides.is_empty() && !takes_overrides {
        eprintln!("error: this subcommand takes no config overrides (got --{})", overrides[0].0);
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a, &overrides),
        Command::Pretrain(a) => run_pretrain(a, &overrides),
        Command::Distill(a) => run_distill(a, &overrides),
        Command::Infer(a) => run_infer(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Selftest(a) => match run_selftest(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
