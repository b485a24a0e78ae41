//! `decodet` command-line entry point. Reports go to stdout as JSON, prose to
//! stderr. Exit codes: 0 success, 1 validation failure, 2 I/O failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use decodet::dataset::{
    default_labels, depth_size_correlation, generate_toy_dataset, instance_stats, parse_ratios,
    split_quotas, stratified_split, DepthSource, Manifest, Split, ToyConfig,
};
use decodet::depth::{inject_noise, load_depth, save_depth_pfm, save_depth_png16, summarize};
use decodet::eval::{evaluate, load_detections, save_detections, DEFAULT_IOU};
use decodet::gradcheck::{self, GradcheckOptions};
use decodet::haze::{synthesize_dataset, AtmosphereConfig, SynthInput};
use decodet::model::{DecodeConfig, ModelConfig, ToyModel};
use decodet::pipeline::predict_image;
use decodet::train::{pdft, run_stage, EpochLog, PdftSettings, StageConfig};
use decodet::{container, Error};

#[derive(Parser, Debug)]
#[command(
    name = "decodet",
    version,
    about = "Depth-conditioned detection in haze: data, training and evaluation tools"
)]
struct Cli {
    /// Cap on worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Composite haze onto clear images using per-pixel depth.
    Synth(SynthArgs),
    /// Inspect or perturb depth files.
    #[command(subcommand)]
    Depth(DepthCommand),
    /// Assign seeded, stratified split labels.
    Split(SplitArgs),
    /// Instance counts per split, category and size group.
    Stats(ManifestArg),
    /// Spearman correlation between mean box depth and box area.
    Correlate(CorrelateArgs),
    /// Generate the procedural toy corpus.
    Toygen(ToygenArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Two-stage domain fine-tuning.
    Pdft(PdftArgs),
    /// Write detections of a checkpoint over a manifest.
    Predict(PredictArgs),
    /// Score detections against a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory of clear RGB PNGs.
    #[arg(
        long,
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    input: Option<PathBuf>,
    /// Directory of depth files matching the image stems.
    #[arg(long, requires = "input")]
    depth: Option<PathBuf>,
    /// Manifest of clear images; depth references and annotations are carried over.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Atmosphere sampler config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Meters per unit for 16-bit PNG depth files.
    #[arg(long, default_value_t = 1.0)]
    depth_scale: f64,
}

#[derive(Subcommand, Debug)]
enum DepthCommand {
    /// Validate a depth file and print its summary.
    Check {
        path: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Add Gaussian noise and clamp at zero.
    Noise {
        #[arg(long)]
        input: PathBuf,
        /// Output path; `.png` writes scaled 16-bit PNG, anything else PFM.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

#[derive(Args, Debug)]
struct ManifestArg {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "8:1:2")]
    ratios: String,
    /// Comma-separated labels, one per ratio part.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest (default: overwrite the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of depth files named like the manifest entries (default:
    /// the manifest's own depth references).
    #[arg(long)]
    depth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ToygenArgs {
    #[arg(long)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 6)]
    objects: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Stage config (JSON); may carry a `model` section.
    #[arg(long)]
    stage: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint index instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Overrides the stage seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PdftArgs {
    #[arg(long)]
    sim: PathBuf,
    #[arg(long)]
    real: PathBuf,
    /// Schedule config (JSON); may carry a `model` section.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint index (`.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only images carrying this split label.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    score_threshold: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU)]
    iou: f64,
    /// Also report mAP averaged over IoU 0.50:0.05:0.95.
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Deserialize)]
struct StageFile {
    #[serde(flatten)]
    stage: StageConfig,
    #[serde(default)]
    model: ModelConfig,
}

#[derive(Deserialize)]
struct PdftFile {
    #[serde(flatten)]
    settings: PdftSettings,
    #[serde(default)]
    model: ModelConfig,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: String,
    /// Report to print instead of the bare error record.
    report: Option<Value>,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_io() { 2 } else { 1 },
            error: e.to_string(),
            report: None,
        }
    }
}

impl Failure {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 2,
            error: format!("{}: {e}", path.display()),
            report: None,
        }
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            error: msg.into(),
            report: None,
        }
    }
}

type CmdResult = Result<(Value, String), Failure>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    s.parse().map_err(Failure::from)
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let config = match &a.config {
        Some(p) => AtmosphereConfig::load(p)?,
        None => AtmosphereConfig::default(),
    };
    let loaded;
    let base;
    let input = match (&a.manifest, &a.input) {
        (Some(m), _) => {
            loaded = Manifest::load(m)?;
            base = base_dir(m);
            SynthInput::Manifest {
                manifest: &loaded,
                base_dir: &base,
            }
        }
        (None, Some(dir)) => {
            let depth_dir = a
                .depth
                .as_ref()
                .ok_or_else(|| Failure::invalid("--depth is required with --input"))?;
            SynthInput::Directory {
                image_dir: dir,
                depth_dir,
                png_depth_scale: a.depth_scale,
            }
        }
        (None, None) => return Err(Failure::invalid("either --input or --manifest is required")),
    };
    let report = synthesize_dataset(input, &a.out, &config, a.seed)?;
    let summary = format!(
        "synthesized {} images into {} ({} skipped)",
        report.manifest.images.len(),
        a.out.display(),
        report.errors.len()
    );
    Ok((
        json!({
            "out": a.out,
            "manifest": a.out.join("manifest.json"),
            "images": report.manifest.images.len(),
            "errors": report.errors,
        }),
        summary,
    ))
}

fn cmd_depth(c: &DepthCommand) -> CmdResult {
    match c {
        DepthCommand::Check { path, scale } => {
            let d = load_depth(path, *scale)?;
            d.check_nonnegative()?;
            let s = summarize(&d);
            let msg = format!(
                "{}: {}x{} depth in [{}, {}]",
                path.display(),
                s.width,
                s.height,
                s.min,
                s.max
            );
            Ok((json!({ "path": path, "valid": true, "summary": s }), msg))
        }
        DepthCommand::Noise {
            input,
            out,
            variance,
            seed,
            scale,
        } => {
            let d = load_depth(input, *scale)?;
            let noisy = inject_noise(&d, *variance, *seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
            }
            if out.extension().is_some_and(|e| e == "png") {
                save_depth_png16(out, &noisy, *scale)?;
            } else {
                save_depth_pfm(out, &noisy)?;
            }
            let s = summarize(&noisy);
            Ok((
                json!({ "input": input, "out": out, "variance": variance, "seed": seed, "summary": s }),
                format!("wrote noisy depth to {}", out.display()),
            ))
        }
    }
}

fn cmd_split(a: &SplitArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let ratios = parse_ratios(&a.ratios)?;
    let labels = match &a.labels {
        Some(l) => l
            .split(',')
            .map(|s| parse_split(s.trim()))
            .collect::<Result<Vec<_>, _>>()?,
        None => default_labels(ratios.len())?,
    };
    let out = stratified_split(&m, &ratios, &labels, a.seed)?;
    let path = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    out.save(&path)?;
    let quotas = split_quotas(m.images.len(), &ratios);
    let counts: serde_json::Map<String, Value> = labels
        .iter()
        .zip(&quotas)
        .map(|(l, q)| (l.name().to_string(), json!(q)))
        .collect();
    let msg = format!(
        "split {} images at {} into {}",
        m.images.len(),
        a.ratios,
        path.display()
    );
    Ok((
        json!({ "out": path, "seed": a.seed, "counts": counts }),
        msg,
    ))
}

fn cmd_stats(a: &ManifestArg) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let s = instance_stats(&m)?;
    let msg = format!(
        "{} annotations over {} images",
        s.total_annotations,
        m.images.len()
    );
    Ok((to_value(&s), msg))
}

fn cmd_correlate(a: &CorrelateArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let base = base_dir(&a.manifest);
    let source = match &a.depth {
        Some(d) => {
            if !d.is_dir() {
                return Err(Failure::io(
                    d,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "depth directory not found"),
                ));
            }
            DepthSource::Directory(d)
        }
        None => DepthSource::ManifestRelative(&base),
    };
    let r = depth_size_correlation(&m, source)?;
    let msg = format!(
        "spearman rho {:.4} over {} boxes ({} skipped)",
        r.rho,
        r.samples,
        r.skipped.len()
    );
    Ok((to_value(&r), msg))
}

fn cmd_toygen(a: &ToygenArgs) -> CmdResult {
    let cfg = ToyConfig {
        num_images: a.images,
        resolution: a.resolution,
        objects_per_image: a.objects,
        seed: a.seed,
        ..ToyConfig::default()
    };
    let r = generate_toy_dataset(&cfg, &a.out)?;
    let msg = format!(
        "generated {} images with {} boxes in {}",
        r.manifest.images.len(),
        r.manifest.annotations.len(),
        a.out.display()
    );
    Ok((
        json!({
            "out": a.out,
            "manifest": a.out.join("manifest.json"),
            "images": r.manifest.images.len(),
            "annotations": r.manifest.annotations.len(),
            "shortfalls": r.shortfalls,
        }),
        msg,
    ))
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), Failure> {
    let mut text = String::new();
    for rec in log {
        text.push_str(&serde_json::to_string(rec).expect("log serializes"));
        text.push('\n');
    }
    write_text(path, &text)
}

fn initial_model(init: Option<&Path>, config: ModelConfig, seed: u64) -> Result<ToyModel, Failure> {
    Ok(match init {
        Some(p) => container::load(p)?,
        None => ToyModel::new(config, seed)?,
    })
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let file: StageFile = read_json(&a.stage)?;
    let mut stage = file.stage;
    if let Some(s) = a.seed {
        stage.seed = s;
    }
    let m = Manifest::load(&a.manifest)?;
    let model = initial_model(a.init.as_deref(), file.model, stage.seed)?;
    container::save(&model, &a.out, "init")?;
    let out = run_stage(&model, &m, &base_dir(&a.manifest), &stage)?;
    container::save(&out.model, &a.out, "final")?;
    write_log(&a.out.join("train_log.jsonl"), &out.log)?;
    let msg = format!(
        "trained {} epochs on {} images",
        stage.epochs,
        m.images.len()
    );
    Ok((
        json!({
            "checkpoints": [a.out.join("init.json"), a.out.join("final.json")],
            "log": out.log,
        }),
        msg,
    ))
}

fn cmd_pdft(a: &PdftArgs) -> CmdResult {
    let file: PdftFile = read_json(&a.config)?;
    let mut settings = file.settings;
    if let Some(s) = a.seed {
        settings.seed = s;
    }
    let cfg = settings.derive()?;
    let sim = Manifest::load(&a.sim)?;
    let real = Manifest::load(&a.real)?;
    let model0 = initial_model(a.init.as_deref(), file.model, settings.seed)?;
    container::save(&model0, &a.out, "init")?;
    let out = pdft(
        &model0,
        (&sim, &base_dir(&a.sim)),
        (&real, &base_dir(&a.real)),
        &cfg,
    )?;
    container::save(&out.stage1, &a.out, "stage1")?;
    container::save(&out.stage2, &a.out, "stage2")?;
    write_log(&a.out.join("pdft_log.jsonl"), &out.log)?;
    let checkpoints: Vec<PathBuf> = ["init", "stage1", "stage2"]
        .iter()
        .map(|n| a.out.join(format!("{n}.json")))
        .collect();
    let msg = format!(
        "stage 1: {} epochs at lr {}; stage 2: {} epochs at lr {}",
        cfg.stage1.epochs, cfg.stage1.lr, cfg.stage2.epochs, cfg.stage2.lr
    );
    Ok((
        json!({
            "checkpoints": checkpoints,
            "stage1": { "lr": cfg.stage1.lr, "frozen": cfg.stage1.frozen_prefixes },
            "stage2": { "lr": cfg.stage2.lr, "frozen": cfg.stage2.frozen_prefixes },
            "log": out.log,
        }),
        msg,
    ))
}

fn select_split(m: Manifest, split: Option<&str>) -> Result<Manifest, Failure> {
    match split {
        Some(s) => Ok(m.filter_split(parse_split(s)?)),
        None => Ok(m),
    }
}

fn cmd_predict(a: &PredictArgs) -> CmdResult {
    let m = select_split(Manifest::load(&a.manifest)?, a.split.as_deref())?;
    let model = container::load(&a.checkpoint)?;
    let base = base_dir(&a.manifest);
    let opts = DecodeConfig {
        score_threshold: a.score_threshold,
        ..DecodeConfig::default()
    };
    let per_image: Vec<_> = m
        .images
        .par_iter()
        .map(|rec| predict_image(&model, rec, &base, &opts))
        .collect::<Result<_, _>>()?;
    let dets: Vec<_> = per_image.into_iter().flatten().collect();
    save_detections(&a.out, &dets)?;
    let msg = format!("{} detections over {} images", dets.len(), m.images.len());
    Ok((
        json!({ "out": a.out, "images": m.images.len(), "detections": dets.len() }),
        msg,
    ))
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let m = select_split(Manifest::load(&a.manifest)?, a.split.as_deref())?;
    let dets = load_detections(&a.preds)?;
    let r = evaluate(&m, &dets, a.iou, a.sweep)?;
    let msg = format!("mAP@{} = {:.4}", a.iou, r.map);
    Ok((to_value(&r), msg))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let r = gradcheck::run(&a.op, a.tol, &opts)?;
    let mut msg = String::new();
    for op in &r.ops {
        msg.push_str(&format!(
            "{:<28} max_rel_error {:.3e} {}\n",
            op.op,
            op.max_rel_error,
            if op.pass { "ok" } else { "FAIL" }
        ));
    }
    msg.push_str(if r.pass {
        "all gradients agree"
    } else {
        "gradient check failed"
    });
    let value = json!({
        "tolerance": r.tolerance,
        "pass": r.pass,
        "ops": r.ops.iter().map(|o| json!({
            "op": o.op,
            "max_rel_error": o.max_rel_error,
            "max_abs_error": o.max_abs_error,
            "probes": o.probes,
            "pass": o.pass,
        })).collect::<Vec<_>>(),
    });
    if r.pass {
        Ok((value, msg))
    } else {
        Err(Failure {
            report: Some(value),
            ..Failure::invalid(msg)
        })
    }
}

fn emit(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(v).expect("report serializes")
    );
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Depth(c) => cmd_depth(c),
        Command::Split(a) => cmd_split(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Toygen(a) => cmd_toygen(a),
        Command::Train(a) => cmd_train(a),
        Command::Pdft(a) => cmd_pdft(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("--threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok((report, summary)) => {
            emit(&report);
            eprintln!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            emit(
                &f.report
                    .unwrap_or_else(|| json!({ "error": f.error, "exit_code": f.code })),
            );
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
