//! Subcommand configurations and their runners.

use crate::config::write_resolved;
use crate::overlay::draw_overlay;
use crate::CliError;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use stairnet::data::{
    dataset_line_aspect_stats, encode_labels, generate_dataset, letterbox, load_dataset, load_labels,
    serialize_annotation, LineAnnotation, Sample, SyntheticSceneParams, DEFAULT_BIN_COUNT,
    DEFAULT_BIN_WIDTH, DEFAULT_PAD_GRAY,
};
use stairnet::eval::{mfwiou, EvalReport};
use stairnet::model::{image_to_tensor, load_checkpoint, ModelConfig, StairNet};
use stairnet::nn::Mode;
use stairnet::train::{
    evaluate_prepared, prepare_samples, train, EvalConfig, TrainConfig, TrainError, Trainer,
};
use std::path::{Path, PathBuf};
use std::time::Instant;

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

// ------------------------------------------------------------------ generate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    /// Scene parameters; `seed` above replaces the one in here.
    pub scene: SyntheticSceneParams,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            out: PathBuf::from("data"),
            count: 16,
            seed: 0,
            scene: SyntheticSceneParams::default(),
        }
    }
}

pub fn generate(mut cfg: GenerateConfig) -> Result<(), CliError> {
    cfg.scene.seed = cfg.seed;
    cfg.scene.validate()?;
    write_resolved(&cfg.out, &cfg)?;
    let manifest = generate_dataset(&cfg.out, &cfg.scene, cfg.count)?;
    println!("wrote {} samples to {}", manifest.count, cfg.out.display());
    Ok(())
}

// --------------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Checkpoint to continue from; its model configuration takes precedence.
    pub resume: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/train"),
            resume: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn load_nonempty(dir: &Path) -> Result<Vec<Sample>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} not found", dir.display())));
    }
    let samples = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("dataset {} has no images", dir.display())));
    }
    Ok(samples)
}

pub fn run_train(mut cfg: TrainRunConfig) -> Result<(), CliError> {
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let t = Trainer::resume(path, cfg.train.clone())?;
            cfg.model = t.model.config().clone();
            t
        }
        None => Trainer::new(StairNet::new(cfg.model.clone())?, cfg.train.clone())?,
    };
    let samples = load_nonempty(&cfg.data)?;
    write_resolved(&cfg.out, &cfg)?;
    let t = &cfg.train;
    println!(
        "training: epochs={} batch={} lr={:e} wd={:e} halving every {} epochs, width {}, {} images",
        t.epochs,
        t.batch_size,
        t.initial_lr,
        t.weight_decay,
        t.lr_halving_period,
        cfg.model.width_factor,
        samples.len()
    );
    let data = prepare_samples(&samples, cfg.model.image_size as u32, t.pad_gray);
    let summary = train(&mut trainer, &data, &cfg.out, &cfg.eval, |s, report| {
        let extra = report
            .map(|r| format!(" FWIOU@0.5 {:.4}", r.operating.fwiou))
            .unwrap_or_default();
        println!(
            "epoch {:>4} lr {:.3e} loss {:.6} (cls {:.6}, loc {:.6}) {:.1}s{extra}",
            s.epoch, s.lr, s.loss.total, s.loss.cls, s.loss.loc, s.wall_time
        );
    })?;
    for c in &summary.checkpoints {
        println!("checkpoint {}", c.display());
    }
    print_operating(&summary.final_eval);
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Score the ground-truth grids themselves instead of a network.
    pub ground_truth: bool,
    /// Grid used with `ground_truth`; a checkpoint carries its own.
    pub image_size: usize,
    pub grid_n: usize,
    pub eval: EvalConfig,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        EvalRunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/eval"),
            checkpoint: None,
            ground_truth: false,
            image_size: m.image_size,
            grid_n: m.grid_n,
            eval: EvalConfig::default(),
        }
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

fn print_operating(r: &EvalReport) {
    let op = &r.operating;
    println!(
        "c={:.2} Accuracy {:.4} Recall {:.4} FWIOU {:.4} mFWIOU {:.4}",
        op.threshold, op.accuracy, op.recall, op.fwiou, r.mfwiou
    );
}

pub fn run_eval(cfg: EvalRunConfig) -> Result<(), CliError> {
    cfg.eval.confidence.validate().map_err(TrainError::from)?;
    let samples = load_nonempty(&cfg.data)?;
    write_resolved(&cfg.out, &cfg)?;
    let report = match (&cfg.checkpoint, cfg.ground_truth) {
        (_, true) => {
            let grid = stairnet::data::GridConfig::new(cfg.image_size, cfg.grid_n)?;
            let data = prepare_samples(&samples, cfg.image_size as u32, cfg.eval.pad_gray);
            let labels: Vec<_> = data.iter().map(|s| encode_labels(&s.annotations, &grid)).collect();
            let preds: Vec<_> = labels.iter().map(|l| l.decode()).collect();
            mfwiou(&preds, &labels, &cfg.eval.confidence).map_err(TrainError::from)?
        }
        (Some(path), false) => {
            let mut model = load_checkpoint(path)?.to_model()?;
            let data = prepare_samples(&samples, model.config().image_size as u32, cfg.eval.pad_gray);
            evaluate_prepared(&mut model, &data, &cfg.eval)?
        }
        (None, false) => {
            return Err(CliError::Config("eval needs --checkpoint or --ground-truth".into()));
        }
    };
    let json = cfg.out.join(REPORT_JSON);
    std::fs::write(&json, report.to_json() + "\n").map_err(|e| io(&json, e))?;
    let text = cfg.out.join(REPORT_TEXT);
    std::fs::write(&text, report.to_text_table()).map_err(|e| io(&text, e))?;
    print_operating(&report);
    Ok(())
}

// --------------------------------------------------------------------- infer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferRunConfig {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub images: Vec<PathBuf>,
    pub score_threshold: f32,
    pub overlay: bool,
    pub pad_gray: u8,
    /// Timed forward passes for the latency figure; 0 skips the benchmark.
    pub latency_runs: usize,
    pub latency_warmup: usize,
}

impl Default for InferRunConfig {
    fn default() -> Self {
        InferRunConfig {
            checkpoint: PathBuf::from("model.safetensors"),
            out: PathBuf::from("runs/infer"),
            images: Vec::new(),
            score_threshold: 0.5,
            overlay: false,
            pad_gray: DEFAULT_PAD_GRAY,
            latency_runs: 50,
            latency_warmup: 10,
        }
    }
}

pub const LATENCY_FILE: &str = "latency.json";

#[derive(Debug, Serialize)]
struct LatencyReport {
    per_image_ms: Vec<(String, f64)>,
    benchmark_runs: usize,
    benchmark_warmup: usize,
    median_ms: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn run_infer(cfg: InferRunConfig) -> Result<(), CliError> {
    if cfg.images.is_empty() {
        return Err(CliError::Config("infer needs at least one image".into()));
    }
    let mut model = load_checkpoint(&cfg.checkpoint)?.to_model()?;
    let size = model.config().image_size as u32;
    let grid = model.grid();
    let originals = cfg
        .images
        .iter()
        .map(|p| {
            image::open(p)
                .map(|i| i.to_rgb8())
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<RgbImage>, _>>()?;
    write_resolved(&cfg.out, &cfg)?;
    let labels_dir = cfg.out.join("labels");
    std::fs::create_dir_all(&labels_dir).map_err(|e| io(&labels_dir, e))?;
    let overlay_dir = cfg.out.join("overlays");
    if cfg.overlay {
        std::fs::create_dir_all(&overlay_dir).map_err(|e| io(&overlay_dir, e))?;
    }
    let mut per_image = Vec::new();
    let mut bench_input = None;
    for (path, original) in cfg.images.iter().zip(&originals) {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let (input, lb) = letterbox(original, size, [cfg.pad_gray; 3]);
        let x = image_to_tensor(&input);
        let started = Instant::now();
        let out = model.forward(&x, Mode::Eval)?;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        let detections = out.prediction(0, grid).decode(cfg.score_threshold);
        let lines: Vec<LineAnnotation> = lb.annotations_to_source_clipped(
            &detections.iter().map(|d| d.to_annotation()).collect::<Vec<_>>(),
            original.width(),
            original.height(),
        );
        let label_path = labels_dir.join(format!("{stem}.txt"));
        std::fs::write(&label_path, serialize_annotation(&lines)).map_err(|e| io(&label_path, e))?;
        if cfg.overlay {
            let p = overlay_dir.join(format!("{stem}.png"));
            draw_overlay(original, &lines).save(&p).map_err(|e| io(&p, e))?;
        }
        println!("{stem}: {} segments, {ms:.1} ms", lines.len());
        per_image.push((stem, ms));
        bench_input.get_or_insert(x);
    }
    let mut times = Vec::new();
    if cfg.latency_runs > 0 {
        let x = bench_input.expect("at least one image");
        for i in 0..cfg.latency_warmup + cfg.latency_runs {
            let t = Instant::now();
            model.forward(&x, Mode::Eval)?;
            if i >= cfg.latency_warmup {
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let report = LatencyReport {
        per_image_ms: per_image,
        benchmark_runs: cfg.latency_runs,
        benchmark_warmup: cfg.latency_warmup,
        median_ms: median(times),
    };
    if let Some(m) = report.median_ms {
        println!(
            "latency: median {m:.1} ms over {} runs after {} warmups (batch 1)",
            cfg.latency_runs, cfg.latency_warmup
        );
    }
    let path = cfg.out.join(LATENCY_FILE);
    let json = serde_json::to_string_pretty(&report).expect("latency serializes");
    std::fs::write(&path, json + "\n").map_err(|e| io(&path, e))
}

// --------------------------------------------------------------------- stats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsRunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub bin_width: f64,
    pub bin_count: usize,
}

impl Default for StatsRunConfig {
    fn default() -> Self {
        StatsRunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/stats"),
            bin_width: DEFAULT_BIN_WIDTH,
            bin_count: DEFAULT_BIN_COUNT,
        }
    }
}

pub const HISTOGRAM_FILE: &str = "aspect_histogram.csv";
pub const SUMMARY_FILE: &str = "aspect_summary.json";

pub fn run_stats(cfg: StatsRunConfig) -> Result<(), CliError> {
    if !cfg.data.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} not found", cfg.data.display())));
    }
    let labels = load_labels(&cfg.data)?;
    let hist = dataset_line_aspect_stats(labels.iter().flat_map(|(_, l)| l), cfg.bin_width, cfg.bin_count)?;
    write_resolved(&cfg.out, &cfg)?;
    let path = cfg.out.join(HISTOGRAM_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
    w.write_record(["bin_lower", "bin_upper", "count"]).map_err(|e| io(&path, e))?;
    for (lo, hi, count) in hist.rows().into_iter().take(hist.bins.len()) {
        w.write_record([format!("{lo:.4}"), format!("{hi:.4}"), count.to_string()])
            .map_err(|e| io(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))?;
    let modal = hist.modal_bin();
    let summary = serde_json::json!({
        "images": labels.len(),
        "lines": hist.total(),
        "overflow": hist.overflow,
        "modal_bin": modal.map(|i| [i as f64 * hist.bin_width, (i + 1) as f64 * hist.bin_width]),
        "fraction_below_0.2": hist.fraction_below(0.2),
    });
    let spath = cfg.out.join(SUMMARY_FILE);
    std::fs::write(&spath, serde_json::to_string_pretty(&summary).expect("json") + "\n")
        .map_err(|e| io(&spath, e))?;
    println!(
        "{} lines from {} label files; {:.1}% below 0.2; modal bin {}",
        hist.total(),
        labels.len(),
        100.0 * hist.fraction_below(0.2),
        modal
            .map(|i| format!("[{:.2}, {:.2})", i as f64 * hist.bin_width, (i + 1) as f64 * hist.bin_width))
            .unwrap_or_else(|| "overflow".into())
    );
    Ok(())
}
