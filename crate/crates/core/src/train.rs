//! Mini-batch training with Adam, a step-halving learning rate, checkpoints
//! and a per-epoch CSV log.

use crate::data::{
    derive_seed, encode_labels, letterbox, mirror_augment, occlude_augment, LabelGrid,
    LineAnnotation, OcclusionConfig, Sample, DEFAULT_PAD_GRAY,
};
use crate::eval::{mfwiou, ConfidenceConfig, EvalError, EvalReport};
use crate::loss::{total_loss_with_grad, LossBreakdown, LossConfig, LossError};
use crate::model::{
    images_to_batch, load_checkpoint, save_checkpoint, CheckpointError, ModelError, StairNet,
};
use crate::nn::Mode;
use crate::tensor::Tensor;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
const KEY_TRAIN_STATE: &str = "train_state";
const KEY_TRAIN_CONFIG: &str = "train_config";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Divergence(Box<Divergence>),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Log { path: PathBuf, message: String },
}

/// Snapshot taken when a batch produces a non-finite loss.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub batch: Vec<String>,
    pub loss: LossBreakdown,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-finite loss at epoch {} step {} (lr {:e}): total {} cls {} loc {}; batch [{}]",
            self.epoch,
            self.step,
            self.lr,
            self.loss.total,
            self.loss.cls,
            self.loss.loc,
            self.batch.join(", ")
        )
    }
}

impl std::error::Error for Divergence {}

/// How per-image losses combine into the batch objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Coefficient of the L2 term added to every trainable gradient.
    pub weight_decay: f64,
    pub lr_halving_period: usize,
    pub seed: u64,
    pub mirror: bool,
    pub mirror_probability: f64,
    pub occlusion: bool,
    pub occlusion_probability: f64,
    pub occlusion_rects: OcclusionConfig,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Evaluate on the training set every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub reduction: Reduction,
    pub loss: LossConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Gray level used when padding non-square images.
    pub pad_gray: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            initial_lr: 5e-4,
            weight_decay: 1e-6,
            lr_halving_period: 50,
            seed: 0,
            mirror: true,
            mirror_probability: 0.5,
            occlusion: true,
            occlusion_probability: 0.5,
            occlusion_rects: OcclusionConfig::default(),
            checkpoint_every: 0,
            eval_every: 0,
            max_steps: None,
            grad_clip: None,
            reduction: Reduction::Mean,
            loss: LossConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pad_gray: DEFAULT_PAD_GRAY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 {
            return bad("epochs, batch_size and lr_halving_period must be positive".into());
        }
        if self.lr_halving_period > self.epochs {
            return bad(format!(
                "lr_halving_period {} exceeds epochs {}",
                self.lr_halving_period, self.epochs
            ));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        for (name, p) in [
            ("mirror_probability", self.mirror_probability),
            ("occlusion_probability", self.occlusion_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        let o = &self.occlusion_rects;
        if o.min_rects > o.max_rects || !(0.0 < o.min_area && o.min_area <= o.max_area && o.max_area <= 1.0) {
            return bad(format!("occlusion_rects {o:?} is not a valid range"));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// `initial_lr / 2^floor(epoch / lr_halving_period)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let halvings = (epoch / config.lr_halving_period.max(1)).min(1023) as i32;
    config.initial_lr * 0.5f64.powi(halvings)
}

/// Adam with the weight decay added to the gradient before the moment updates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut StairNet, lr: f64, weight_decay: f64) {
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |name, p| {
            if !p.trainable {
                return;
            }
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.value.len() {
                let g = p.grad[i] as f64 + weight_decay * p.value[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.value[i] = (p.value[i] as f64 - update) as f32;
            }
        });
    }

    /// Moment tensors as `optim.m.<param>` / `optim.v.<param>`.
    pub fn state_tensors(&self, model: &mut StairNet) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        let mut out = BTreeMap::new();
        model.visit_params(&mut |name, p| {
            for (kind, store) in [("m", &self.m), ("v", &self.v)] {
                if let Some(values) = store.get(name) {
                    out.insert(format!("optim.{kind}.{name}"), (p.shape.clone(), values.clone()));
                }
            }
        });
        out
    }

    pub fn load_state(&mut self, t: u64, m: BTreeMap<String, Vec<f32>>, v: BTreeMap<String, Vec<f32>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Position in the run, stored with every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

/// A training image at the network resolution with its lines.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub name: String,
    pub image: RgbImage,
    pub annotations: Vec<LineAnnotation>,
}

/// Letterboxes every sample to `size` and maps its annotations accordingly.
pub fn prepare_samples(samples: &[Sample], size: u32, pad_gray: u8) -> Vec<PreparedSample> {
    samples
        .iter()
        .map(|s| {
            let (image, lb) = letterbox(&s.image, size, [pad_gray; 3]);
            PreparedSample {
                name: s.name.clone(),
                image,
                annotations: lb.annotations_to_target(&s.annotations),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub steps: usize,
    /// Seconds since the run started.
    pub wall_time: f64,
}

pub struct Trainer {
    pub model: StairNet,
    config: TrainConfig,
    adam: Adam,
    state: TrainState,
}

impl Trainer {
    pub fn new(model: StairNet, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Trainer {
            model,
            config,
            adam,
            state: TrainState::default(),
        })
    }

    /// Restores model weights, optimizer moments and run position.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self, TrainError> {
        let ck = load_checkpoint(path)?;
        let model = ck.to_model()?;
        let state: TrainState = match ck.metadata.get(KEY_TRAIN_STATE) {
            Some(s) => serde_json::from_str(s).map_err(|e| {
                TrainError::Checkpoint(CheckpointError::Format {
                    path: path.to_path_buf(),
                    message: format!("train state: {e}"),
                })
            })?,
            None => TrainState::default(),
        };
        let mut trainer = Trainer::new(model, config)?;
        trainer
            .adam
            .load_state(state.step, ck.tensors_with_prefix("optim.m"), ck.tensors_with_prefix("optim.v"));
        trainer.state = state;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.state.epoch, &self.config)
    }

    fn steps_exhausted(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// True once all epochs or the step budget are used up.
    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs || self.steps_exhausted()
    }

    /// Applies the configured augmentations and encodes the labels.
    fn augment(&self, sample: &PreparedSample, rng: &mut ChaCha8Rng) -> (RgbImage, LabelGrid) {
        let c = &self.config;
        let (mut image, lines) = if c.mirror {
            mirror_augment(&sample.image, &sample.annotations, c.mirror_probability, rng)
        } else {
            (sample.image.clone(), sample.annotations.clone())
        };
        if c.occlusion {
            occlude_augment(&mut image, &c.occlusion_rects, c.occlusion_probability, rng);
        }
        (image, encode_labels(&lines, &self.model.grid()))
    }

    /// One optimizer step on already augmented images.
    pub fn step_on(
        &mut self,
        images: &[&RgbImage],
        labels: &[LabelGrid],
        lr: f64,
    ) -> Result<LossBreakdown, TrainError> {
        let batch = images_to_batch(images).map_err(ModelError::from)?;
        self.model.zero_grad();
        let out = self.model.forward(&batch, Mode::Train).map_err(ModelError::from)?;
        let scale = match self.config.reduction {
            Reduction::Mean => 1.0 / images.len() as f64,
            Reduction::Sum => 1.0,
        };
        let mut d_logits = Tensor::zeros(out.logits.shape());
        let mut d_loc = Tensor::zeros(out.loc.shape());
        let mut sum = LossBreakdown::default();
        for (i, label) in labels.iter().enumerate() {
            let logits: Vec<f64> = out.logits.item(i).iter().map(|&v| v as f64).collect();
            let loc: Vec<f64> = out.loc.item(i).iter().map(|&v| v as f64).collect();
            let (b, g) = total_loss_with_grad(&logits, &loc, label, &self.config.loss)?;
            sum.total += b.total * scale;
            sum.cls += b.cls * scale;
            sum.loc += b.loc * scale;
            for (d, &v) in d_logits.item_mut(i).iter_mut().zip(&g.d_logits) {
                *d = (v * scale) as f32;
            }
            for (d, &v) in d_loc.item_mut(i).iter_mut().zip(&g.d_loc) {
                *d = (v * scale) as f32;
            }
        }
        if !sum.is_finite() {
            return Ok(sum);
        }
        self.model.backward(&d_logits, &d_loc);
        if let Some(max_norm) = self.config.grad_clip {
            clip_gradients(&mut self.model, max_norm);
        }
        self.adam.step(&mut self.model, lr, self.config.weight_decay);
        self.state.step += 1;
        Ok(sum)
    }

    /// Runs one epoch of shuffled, augmented mini-batches.
    pub fn run_epoch(&mut self, data: &[PreparedSample], started: Instant) -> Result<EpochStats, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let epoch = self.state.epoch;
        let lr = lr_schedule(epoch, &self.config);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            if self.steps_exhausted() {
                break;
            }
            let (images, labels): (Vec<RgbImage>, Vec<LabelGrid>) =
                chunk.iter().map(|&i| self.augment(&data[i], &mut rng)).unzip();
            let refs: Vec<&RgbImage> = images.iter().collect();
            let loss = self.step_on(&refs, &labels, lr)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence(Box::new(Divergence {
                    epoch,
                    step: self.state.step,
                    lr,
                    batch: chunk.iter().map(|&i| data[i].name.clone()).collect(),
                    loss,
                })));
            }
            total.total += loss.total;
            total.cls += loss.cls;
            total.loc += loss.loc;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        self.state.epoch += 1;
        Ok(EpochStats {
            epoch,
            lr,
            loss: LossBreakdown {
                total: total.total / n,
                cls: total.cls / n,
                loc: total.loc / n,
            },
            steps,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    pub fn save(&mut self, path: &Path) -> Result<(), TrainError> {
        let extra = self.adam.state_tensors(&mut self.model);
        let mut meta = BTreeMap::new();
        meta.insert(
            KEY_TRAIN_STATE.to_string(),
            serde_json::to_string(&self.state).expect("state serializes"),
        );
        meta.insert(
            KEY_TRAIN_CONFIG.to_string(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        save_checkpoint(path, &mut self.model, &extra, &meta)?;
        Ok(())
    }
}

fn clip_gradients(model: &mut StairNet, max_norm: f64) {
    let mut sq = 0.0f64;
    model.visit_params(&mut |_, p| {
        if p.trainable {
            sq += p.grad.iter().map(|&g| g as f64 * g as f64).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        model.visit_params(&mut |_, p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
}

pub fn checkpoint_name(epochs_done: usize) -> String {
    format!("epoch_{epochs_done:04}.safetensors")
}

/// Appends epoch rows to the metric log, writing the header for a new file.
pub struct MetricLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricLog {
    pub fn open(path: &Path) -> Result<Self, TrainError> {
        let log_err = |e: &dyn fmt::Display| TrainError::Log {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| log_err(&e))?;
        }
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| log_err(&e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer
                .write_record(["epoch", "lr", "loss_total", "loss_cls", "loss_loc", "wall_time"])
                .map_err(|e| log_err(&e))?;
            writer.flush().map_err(|e| log_err(&e))?;
        }
        Ok(MetricLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, s: &EpochStats) -> Result<(), TrainError> {
        let row = [
            s.epoch.to_string(),
            format!("{:e}", s.lr),
            s.loss.total.to_string(),
            s.loss.cls.to_string(),
            s.loss.loc.to_string(),
            format!("{:.3}", s.wall_time),
        ];
        let path = &self.path;
        let log_err = |e: &dyn fmt::Display| TrainError::Log {
            path: path.clone(),
            message: e.to_string(),
        };
        self.writer.write_record(&row).map_err(|e| log_err(&e))?;
        self.writer.flush().map_err(|e| log_err(&e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
    pub final_eval: EvalReport,
}

/// Full run: epochs with logging and checkpoints into `out_dir`, then an
/// evaluation of the final weights on the training set.
pub fn train(
    trainer: &mut Trainer,
    data: &[PreparedSample],
    out_dir: &Path,
    eval: &EvalConfig,
    mut on_epoch: impl FnMut(&EpochStats, Option<&EvalReport>),
) -> Result<TrainSummary, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut log = MetricLog::open(&out_dir.join(METRICS_FILE))?;
    let started = Instant::now();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let every = trainer.config.checkpoint_every;
    let eval_every = trainer.config.eval_every;
    while !trainer.finished() {
        let stats = trainer.run_epoch(data, started)?;
        log.append(&stats)?;
        let done = trainer.state.epoch;
        let report = if eval_every > 0 && done % eval_every == 0 {
            Some(evaluate_prepared(&mut trainer.model, data, eval)?)
        } else {
            None
        };
        on_epoch(&stats, report.as_ref());
        epochs.push(stats);
        if every > 0 && done % every == 0 && !trainer.finished() {
            let path = out_dir.join(checkpoint_name(done));
            trainer.save(&path)?;
            checkpoints.push(path);
        }
    }
    let path = out_dir.join(checkpoint_name(trainer.state.epoch));
    trainer.save(&path)?;
    checkpoints.push(path);
    let final_eval = evaluate_prepared(&mut trainer.model, data, eval)?;
    let eval_path = out_dir.join(EVAL_FILE);
    std::fs::write(&eval_path, final_eval.to_json() + "\n").map_err(|e| TrainError::Log {
        path: eval_path,
        message: e.to_string(),
    })?;
    Ok(TrainSummary {
        epochs,
        checkpoints,
        final_eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub confidence: ConfidenceConfig,
    /// Classifier probability at which a cell emits a segment.
    pub score_threshold: f32,
    pub batch_size: usize,
    pub pad_gray: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            confidence: ConfidenceConfig::default(),
            score_threshold: 0.5,
            batch_size: 4,
            pad_gray: DEFAULT_PAD_GRAY,
        }
    }
}

/// Eval-mode forward over `images` in batches.
pub fn predict(
    model: &mut StairNet,
    images: &[&RgbImage],
    batch_size: usize,
) -> Result<Vec<crate::model::PredictionGrid>, ModelError> {
    let grid = model.grid();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = images_to_batch(chunk)?;
        out.extend(model.forward(&batch, Mode::Eval)?.predictions(grid));
    }
    Ok(out)
}

pub fn evaluate_prepared(
    model: &mut StairNet,
    data: &[PreparedSample],
    cfg: &EvalConfig,
) -> Result<EvalReport, TrainError> {
    let images: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let preds = predict(model, &images, cfg.batch_size)?;
    let detections: Vec<_> = preds.iter().map(|p| p.decode(cfg.score_threshold)).collect();
    let grid = model.grid();
    let labels: Vec<LabelGrid> = data.iter().map(|s| encode_labels(&s.annotations, &grid)).collect();
    Ok(mfwiou(&detections, &labels, &cfg.confidence)?)
}

/// Loads a checkpoint and evaluates it on `samples`.
pub fn evaluate_checkpoint(path: &Path, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport, TrainError> {
    let mut model = load_checkpoint(path)?.to_model()?;
    let size = model.config().image_size as u32;
    let data = prepare_samples(samples, size, cfg.pad_gray);
    evaluate_prepared(&mut model, &data, cfg)
}
