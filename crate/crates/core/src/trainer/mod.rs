//! Two-step alternating training: step 1 updates the classifier on
//! augmented source images, step 2 updates the augmenter under the
//! perceptual (and optional reconstruction) loss. The feature extractor is
//! never updated.

mod checkpoint;
mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::{Checkpoint, Progress, RngStates, FORMAT_VERSION, MAGIC};
pub use config::{StepRatio, TrainConfig, KEYS};

use crate::alignment::{perceptual_loss, FeatureExtractor, PerceptualConfig};
use crate::augmentation::{AugmenterState, MixupDistribution, Variant};
use crate::autograd::{Gradients, Graph, Tensor};
use crate::classifier::{ClassifierState, LabelBatch};
use crate::data::{DomainDataset, ImageBatch, TargetSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::optim::{AdamW, Sgd};
use crate::rng::{self, RngState};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierStep {
    pub loss: f64,
    pub grad_norm: f64,
}

/// What step 2 minimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmenterObjective {
    pub perceptual: PerceptualConfig,
    pub use_rec_loss: bool,
    pub rec_on_target: bool,
}

impl AugmenterObjective {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AugmenterObjective {
            perceptual: cfg.perceptual(),
            use_rec_loss: cfg.use_rec_loss,
            rec_on_target: cfg.rec_on_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmenterStep {
    pub loss: f64,
    pub perceptual: f64,
    pub reconstruction: Option<f64>,
    pub style_terms: Vec<(String, f64)>,
    pub content_terms: Vec<(String, f64)>,
    pub grad_norm: f64,
}

fn non_finite(phase: &str, detail: String) -> Error {
    Error::NonFinite {
        step: 0,
        phase: phase.into(),
        detail,
    }
}

fn check_finite(phase: &str, loss: f64, grads: &Gradients, components: &str) -> Result<f64> {
    let norm = grads.global_norm();
    if !loss.is_finite() || !norm.is_finite() {
        return Err(non_finite(phase, format!("loss {loss} ({components}), gradient norm {norm}")));
    }
    Ok(norm)
}

/// Step 1: one classifier update on `augment(x_s, x_t)` with the source
/// labels. The augmenter is only read.
pub fn step_classifier(
    cm: &mut ClassifierState,
    opt: &mut Sgd,
    aum: &AugmenterState,
    x_s: &ImageBatch,
    labels: &LabelBatch,
    x_t: &ImageBatch,
    lambda: Option<f64>,
) -> Result<ClassifierStep> {
    if labels.len() != x_s.len() {
        return Err(Error::Shape(format!("{} labels for {} images", labels.len(), x_s.len())));
    }
    let x_aug = aum.augment_images(x_s, x_t, lambda)?;
    let mut g = Graph::new();
    let x = g.constant(x_aug.to_tensor());
    let (logits, bn) = cm.forward(&mut g, &x, true)?;
    let loss = g.cross_entropy(&logits, labels.one_hot())?;
    let value = loss.item();
    let grads = g.backward(&loss)?;
    let grad_norm = check_finite("classifier", value, &grads, &format!("cross-entropy {value}"))?;
    opt.step(cm, &grads);
    cm.apply_bn_updates(&bn);
    Ok(ClassifierStep { loss: value, grad_norm })
}

/// Step 2: one augmenter update. The feature extractor is only read and the
/// classifier is not involved.
pub fn step_augmenter(
    aum: &mut AugmenterState,
    opt: &mut AdamW,
    sam: &FeatureExtractor,
    x_s: &ImageBatch,
    x_t: &ImageBatch,
    lambda: Option<f64>,
    objective: &AugmenterObjective,
) -> Result<AugmenterStep> {
    let mut g = Graph::new();
    let xs = g.constant(x_s.to_tensor());
    let xt = g.constant(x_t.to_tensor());
    let (mut total, perceptual, style_terms, content_terms) = if objective.perceptual.is_inactive() {
        (g.constant(Tensor::from_elem(IxDyn(&[]), 0.0)), 0.0, Vec::new(), Vec::new())
    } else {
        let x_aug = aum.augment(&mut g, &xs, &xt, lambda)?;
        let p = perceptual_loss(&mut g, sam, &objective.perceptual, &x_aug, &xs, &xt)?;
        let v = p.total.item();
        (p.total, v, p.style_terms, p.content_terms)
    };
    let mut reconstruction = None;
    if objective.use_rec_loss {
        let mut r = aum.reconstruction_loss(&mut g, &xs)?;
        if objective.rec_on_target {
            let rt = aum.reconstruction_loss(&mut g, &xt)?;
            r = g.add(&r, &rt)?;
        }
        reconstruction = Some(r.item());
        total = g.add(&total, &r)?;
    }
    let loss = total.item();
    let mut grad_norm = 0.0;
    if total.requires_grad() {
        let grads = g.backward(&total)?;
        let parts = format!("perceptual {perceptual}, reconstruction {}", reconstruction.unwrap_or(0.0));
        grad_norm = check_finite("augmenter", loss, &grads, &parts)?;
        opt.step(aum, &grads);
    }
    Ok(AugmenterStep {
        loss,
        perceptual,
        reconstruction,
        style_terms,
        content_terms,
        grad_norm,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Warning { message: String },
    EpochEnd { epoch: usize, batches_done: u64 },
    Checkpoint { path: String, batches_done: u64 },
    Abort { batch: u64, epoch: usize, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    /// Zero-based global batch index.
    pub batch: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub perceptual: Option<f64>,
    pub reconstruction: Option<f64>,
    pub grad_norm: f64,
    pub target_index: usize,
    pub lambda: Option<f64>,
    pub millis: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Classifier,
    Augmenter,
}

/// Resumable training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub aum: AugmenterState,
    pub cm: ClassifierState,
    pub sam: FeatureExtractor,
    pub cm_opt: Sgd,
    pub aum_opt: AdamW,
    pub progress: Progress,
    epoch_order: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    pick_rng: ChaCha8Rng,
    mixup_rng: ChaCha8Rng,
    mixup: MixupDistribution,
    objective: AugmenterObjective,
}

impl Trainer {
    /// Fresh models from `config`. Returns the trainer plus any warnings
    /// about missing pretrained weights.
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<(Self, Vec<String>)> {
        config.validate()?;
        let mut warnings = Vec::new();
        let (cm, w) = ClassifierState::load(
            config.cm_backbone,
            num_classes,
            config.input_size,
            config.train_seed,
            config.cm_weights.as_deref(),
        )?;
        warnings.extend(w);
        let (sam, w) = FeatureExtractor::load(config.sam_backbone, config.sam_weights.as_deref())?;
        warnings.extend(w);
        let aum = AugmenterState::new(config.variant, config.architecture(), config.train_seed);
        let seed = config.train_seed;
        let t = Trainer {
            cm_opt: Sgd::new(config.cm_lr, config.cm_momentum),
            aum_opt: AdamW::new(config.aum_lr, config.aum_weight_decay),
            mixup: config.mixup()?,
            objective: AugmenterObjective::from_config(&config),
            config,
            aum,
            cm,
            sam,
            progress: Progress::default(),
            epoch_order: Vec::new(),
            shuffle_rng: rng::stream(seed, rng::SHUFFLE),
            pick_rng: rng::stream(seed, rng::TARGET_PICK),
            mixup_rng: rng::stream(seed, rng::MIXUP),
        };
        Ok((t, warnings))
    }

    /// Continues from a checkpoint; the feature extractor is resolved from
    /// the checkpoint's config.
    pub fn from_checkpoint(c: Checkpoint) -> Result<(Self, Vec<String>)> {
        let (sam, w) = FeatureExtractor::load(c.config.sam_backbone, c.config.sam_weights.as_deref())?;
        let t = Trainer {
            mixup: c.config.mixup()?,
            objective: AugmenterObjective::from_config(&c.config),
            config: c.config,
            aum: c.aum,
            cm: c.cm,
            sam,
            cm_opt: c.cm_opt,
            aum_opt: c.aum_opt,
            progress: c.progress,
            epoch_order: c.epoch_order,
            shuffle_rng: c.rng.shuffle.restore()?,
            pick_rng: c.rng.target_pick.restore()?,
            mixup_rng: c.rng.mixup.restore()?,
        };
        Ok((t, w.into_iter().collect()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            progress: self.progress,
            epoch_order: self.epoch_order.clone(),
            rng: RngStates {
                shuffle: RngState::capture(&self.shuffle_rng),
                target_pick: RngState::capture(&self.pick_rng),
                mixup: RngState::capture(&self.mixup_rng),
            },
            aum: self.aum.clone(),
            cm: self.cm.clone(),
            cm_opt: self.cm_opt.clone(),
            aum_opt: self.aum_opt.clone(),
        }
    }

    pub fn batches_per_epoch(&self, n_source: usize) -> usize {
        n_source.div_ceil(self.config.batch_size)
    }

    /// Batches the run will process in total.
    pub fn planned_batches(&self, n_source: usize) -> u64 {
        let all = (self.config.epochs * self.batches_per_epoch(n_source)) as u64;
        match self.config.max_steps {
            0 => all,
            m => all.min(m),
        }
    }

    pub fn is_finished(&self, n_source: usize) -> bool {
        self.progress.batches_done >= self.planned_batches(n_source)
    }

    /// Processes the next source batch: draws the target image and the
    /// mixing coefficient, then runs the configured step-1/step-2 updates.
    pub fn train_batch(&mut self, source: &DomainDataset, targets: &TargetSet) -> Result<Vec<StepRecord>> {
        let n = source.len();
        if n == 0 {
            return Err(Error::Validation("source dataset is empty".into()));
        }
        if targets.images.is_empty() {
            return Err(Error::Validation("no target images".into()));
        }
        if source.num_classes() != self.cm.num_classes() {
            return Err(Error::Validation(format!(
                "classifier has {} classes, source set {}",
                self.cm.num_classes(),
                source.num_classes()
            )));
        }
        if self.progress.batch_in_epoch == 0 {
            self.epoch_order = (0..n).collect();
            self.epoch_order.shuffle(&mut self.shuffle_rng);
        }
        let bs = self.config.batch_size;
        let start = self.progress.batch_in_epoch * bs;
        let idx = &self.epoch_order[start..(start + bs).min(n)];
        let x_s = source.load_batch(idx, self.config.input_size)?;
        let labels = LabelBatch::from_indices(x_s.labels.as_deref().expect("labeled"), self.cm.num_classes())?;

        let target_index = self.pick_rng.gen_range(0..targets.images.len());
        let x_t = targets.batch(target_index)?;
        if x_t.size() != x_s.size() {
            return Err(Error::Shape(format!(
                "target images are {:?}, source batch {:?}",
                x_t.size(),
                x_s.size()
            )));
        }
        let lambda = match self.config.variant {
            Variant::SharedEncoder => Some(self.mixup.sample(&mut self.mixup_rng)),
            Variant::DisentangledEncoders => None,
        };

        let batch = self.progress.batches_done;
        let epoch = self.progress.epoch;
        let tag = |e: Error| match e {
            Error::NonFinite { phase, detail, .. } => Error::NonFinite {
                step: batch,
                phase,
                detail,
            },
            e => e,
        };
        let mut records = Vec::new();
        let record = |phase, loss, perceptual, reconstruction, grad_norm, t0: Instant| StepRecord {
            batch,
            epoch,
            phase,
            loss,
            perceptual,
            reconstruction,
            grad_norm,
            target_index,
            lambda,
            millis: t0.elapsed().as_millis() as u64,
        };
        for _ in 0..self.config.step_ratio.classifier {
            let t0 = Instant::now();
            let s = step_classifier(&mut self.cm, &mut self.cm_opt, &self.aum, &x_s, &labels, &x_t, lambda).map_err(tag)?;
            self.progress.classifier_updates += 1;
            records.push(record(Phase::Classifier, s.loss, None, None, s.grad_norm, t0));
        }
        if batch >= self.config.classifier_warmup_steps {
            for _ in 0..self.config.step_ratio.augmenter {
                let t0 = Instant::now();
                let s = step_augmenter(&mut self.aum, &mut self.aum_opt, &self.sam, &x_s, &x_t, lambda, &self.objective)
                    .map_err(tag)?;
                self.progress.augmenter_updates += 1;
                records.push(record(
                    Phase::Augmenter,
                    s.loss,
                    Some(s.perceptual),
                    s.reconstruction,
                    s.grad_norm,
                    t0,
                ));
            }
        }

        self.progress.batches_done += 1;
        self.progress.batch_in_epoch += 1;
        if self.progress.batch_in_epoch == self.batches_per_epoch(n) {
            self.progress.batch_in_epoch = 0;
            self.progress.epoch += 1;
        }
        Ok(records)
    }
}

/// Baseline without augmentation: the classifier alone, trained on raw
/// source batches with the same optimizer, batch order and epoch budget.
pub fn train_source_only(config: &TrainConfig, source: &DomainDataset) -> Result<ClassifierState> {
    config.validate()?;
    let (mut cm, _) = ClassifierState::load(
        config.cm_backbone,
        source.num_classes(),
        config.input_size,
        config.train_seed,
        config.cm_weights.as_deref(),
    )?;
    let mut opt = Sgd::new(config.cm_lr, config.cm_momentum);
    let mut shuffle = rng::stream(config.train_seed, rng::SHUFFLE);
    let mut done = 0u64;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut shuffle);
        for idx in order.chunks(config.batch_size) {
            if config.max_steps > 0 && done >= config.max_steps {
                return Ok(cm);
            }
            let x = source.load_batch(idx, config.input_size)?;
            let y = LabelBatch::from_indices(x.labels.as_deref().expect("labeled"), cm.num_classes())?;
            let mut g = Graph::new();
            let xv = g.constant(x.to_tensor());
            let (logits, bn) = cm.forward(&mut g, &xv, true)?;
            let loss = g.cross_entropy(&logits, y.one_hot())?;
            let value = loss.item();
            let grads = g.backward(&loss)?;
            check_finite("classifier", value, &grads, "source-only cross-entropy").map_err(|e| match e {
                Error::NonFinite { phase, detail, .. } => Error::NonFinite { step: done, phase, detail },
                e => e,
            })?;
            opt.step(&mut cm, &grads);
            cm.apply_bn_updates(&bn);
            done += 1;
        }
    }
    Ok(cm)
}

/// Line-delimited JSON log, appended to so resumed runs keep one file.
pub struct RunLog {
    out: BufWriter<File>,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::path(path, e))?;
        Ok(RunLog { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, r: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r).map_err(|e| Error::Validation(e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Result of a finished run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
    pub history: Vec<StepRecord>,
}

/// Data a run consumes.
pub struct RunData<'a> {
    pub source: &'a DomainDataset,
    pub targets: &'a TargetSet,
    /// Labeled target-domain set the final classifier is scored on.
    pub eval: &'a DomainDataset,
}

/// Trains from scratch, writing the log, checkpoints and final metrics
/// under `out_dir`.
pub fn train(config: TrainConfig, data: RunData, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::path(out_dir, e))?;
    let mut log = RunLog::open(&out_dir.join(LOG_FILE))?;
    let (trainer, warnings) = Trainer::new(config, data.source.num_classes())?;
    for w in warnings {
        log::warn!("{w}");
        log.write(&LogRecord::Warning { message: w })?;
    }
    run(trainer, data, out_dir, &mut log)
}

/// Continues a run from its checkpoint.
pub fn resume(checkpoint: &Path, data: RunData, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::path(out_dir, e))?;
    let mut log = RunLog::open(&out_dir.join(LOG_FILE))?;
    let (trainer, warnings) = Trainer::from_checkpoint(Checkpoint::load(checkpoint)?)?;
    for w in warnings {
        log.write(&LogRecord::Warning { message: w })?;
    }
    run(trainer, data, out_dir, &mut log)
}

fn save_checkpoint(t: &Trainer, out_dir: &Path, log: &mut RunLog) -> Result<PathBuf> {
    let path = out_dir.join(CHECKPOINT_FILE);
    t.checkpoint().save(&path)?;
    log.write(&LogRecord::Checkpoint {
        path: path.display().to_string(),
        batches_done: t.progress.batches_done,
    })?;
    Ok(path)
}

fn run(mut t: Trainer, data: RunData, out_dir: &Path, log: &mut RunLog) -> Result<TrainOutcome> {
    let n = data.source.len();
    let mut history = Vec::new();
    while !t.is_finished(n) {
        let epoch = t.progress.epoch;
        match t.train_batch(data.source, data.targets) {
            Ok(records) => {
                for r in records {
                    log.write(&LogRecord::Step(r.clone()))?;
                    history.push(r);
                }
            }
            Err(e) => {
                log.write(&LogRecord::Abort {
                    batch: t.progress.batches_done,
                    epoch,
                    error: e.to_string(),
                })?;
                return Err(e);
            }
        }
        let every = t.config.checkpoint_every;
        let epoch_done = t.progress.epoch != epoch;
        if epoch_done {
            log.write(&LogRecord::EpochEnd {
                epoch,
                batches_done: t.progress.batches_done,
            })?;
        }
        if epoch_done || (every > 0 && t.progress.batches_done % every == 0) {
            save_checkpoint(&t, out_dir, log)?;
        }
    }
    save_checkpoint(&t, out_dir, log)?;
    let report = evaluate(&t.cm, data.eval, t.config.batch_size, t.config.train_seed)?;
    let path = out_dir.join(METRICS_FILE);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::path(&path, e))?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        report,
        history,
    })
}
