//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::alignment::{PerceptualConfig, PerceptualMode, SamBackbone};
use crate::augmentation::{ArchitectureSpec, MixupDistribution, Variant};
use crate::classifier::ClassifierBackbone;
use crate::error::{Error, Result};

/// Classifier/augmenter update counts per batch, e.g. `1:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRatio {
    pub classifier: u32,
    pub augmenter: u32,
}

impl std::fmt::Display for StepRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.classifier, self.augmenter)
    }
}

impl std::str::FromStr for StepRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("step_ratio must look like `a:b` with a, b >= 1, got `{s}`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let classifier: u32 = a.trim().parse().map_err(|_| bad())?;
        let augmenter: u32 = b.trim().parse().map_err(|_| bad())?;
        if classifier == 0 || augmenter == 0 {
            return Err(bad());
        }
        Ok(StepRatio { classifier, augmenter })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub variant: Variant,
    pub perceptual_mode: PerceptualMode,
    pub use_rec_loss: bool,
    pub rec_on_target: bool,
    pub w_relu1_2: f64,
    pub w_relu2_2: f64,
    pub w_relu4_3: f64,
    pub pool_kernel: usize,
    pub mixup_alpha: f64,
    pub mixup_beta: f64,
    pub k_targets: usize,
    pub train_seed: u64,
    pub target_seed: u64,
    pub classifier_warmup_steps: u64,
    pub step_ratio: StepRatio,
    pub cm_backbone: ClassifierBackbone,
    pub cm_weights: Option<PathBuf>,
    pub cm_lr: f64,
    pub cm_momentum: f64,
    pub aum_lr: f64,
    pub aum_weight_decay: f64,
    pub aum_width: usize,
    pub aum_res_blocks: usize,
    pub sam_backbone: SamBackbone,
    pub sam_weights: Option<PathBuf>,
    pub source_root: Option<PathBuf>,
    pub target_root: Option<PathBuf>,
    pub eval_root: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub max_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            input_size: 224,
            variant: Variant::SharedEncoder,
            perceptual_mode: PerceptualMode::Gram,
            use_rec_loss: false,
            rec_on_target: true,
            w_relu1_2: 0.25,
            w_relu2_2: 1.0,
            w_relu4_3: 1.0,
            pool_kernel: 2,
            mixup_alpha: 5.0,
            mixup_beta: 1.0,
            k_targets: 1,
            train_seed: 0,
            target_seed: 0,
            classifier_warmup_steps: 0,
            step_ratio: StepRatio {
                classifier: 1,
                augmenter: 1,
            },
            cm_backbone: ClassifierBackbone::ResNet101,
            cm_weights: None,
            cm_lr: 1e-4,
            cm_momentum: 0.9,
            aum_lr: 1e-3,
            aum_weight_decay: 0.01,
            aum_width: 64,
            aum_res_blocks: 4,
            sam_backbone: SamBackbone::Vgg16,
            sam_weights: None,
            source_root: None,
            target_root: None,
            eval_root: None,
            checkpoint_every: 0,
            max_steps: 0,
        }
    }
}

/// Every key with its meaning, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("epochs", "passes over the source set"),
    ("batch_size", "source images per batch"),
    ("input_size", "square side images are resized to"),
    ("variant", "augmenter architecture: SE (shared encoder + mixup) or DE (disentangled encoders)"),
    ("perceptual_mode", "GRAM or AVP"),
    ("use_rec_loss", "add the reconstruction loss to augmenter updates (DE only)"),
    ("rec_on_target", "also reconstruct the target image when use_rec_loss is on"),
    ("w_relu1_2", "style weight of relu1_2"),
    ("w_relu2_2", "style weight of relu2_2"),
    ("w_relu4_3", "content weight of relu4_3"),
    ("pool_kernel", "AVP pooling kernel and stride"),
    ("mixup_alpha", "Beta distribution alpha for the SE mixing coefficient"),
    ("mixup_beta", "Beta distribution beta for the SE mixing coefficient"),
    ("k_targets", "number of unlabeled target images drawn from target_root"),
    ("train_seed", "seed for initialization, shuffling, target picks and mixup"),
    ("target_seed", "seed for choosing the target images"),
    ("classifier_warmup_steps", "leading batches that only update the classifier"),
    ("step_ratio", "classifier:augmenter updates per batch"),
    ("cm_backbone", "small_cnn, resnet50 or resnet101"),
    ("cm_weights", "safetensors file with ImageNet weights for the classifier backbone (empty: random)"),
    ("cm_lr", "classifier SGD learning rate"),
    ("cm_momentum", "classifier SGD momentum"),
    ("aum_lr", "augmenter AdamW learning rate"),
    ("aum_weight_decay", "augmenter AdamW decoupled weight decay"),
    ("aum_width", "augmenter base channel width (64 full, 4 miniature)"),
    ("aum_res_blocks", "residual blocks in each encoder and the decoder"),
    ("sam_backbone", "frozen feature extractor: vgg16 or tiny"),
    ("sam_weights", "safetensors file with VGG-16 weights (empty: tiny fallback)"),
    ("source_root", "labeled source class-folder tree"),
    ("target_root", "target class-folder tree; labels are only used for evaluation"),
    ("eval_root", "evaluation tree (empty: target_root)"),
    ("checkpoint_every", "also checkpoint every N batches (0: end of each epoch only)"),
    ("max_steps", "stop after N batches (0: no limit)"),
];

fn path_opt(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn named<T: std::str::FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::Config(format!("`{key}`: {e}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "input_size" => self.input_size = num(key, v)?,
            "variant" => self.variant = named(key, v)?,
            "perceptual_mode" => self.perceptual_mode = named(key, v)?,
            "use_rec_loss" => self.use_rec_loss = boolean(key, v)?,
            "rec_on_target" => self.rec_on_target = boolean(key, v)?,
            "w_relu1_2" => self.w_relu1_2 = num(key, v)?,
            "w_relu2_2" => self.w_relu2_2 = num(key, v)?,
            "w_relu4_3" => self.w_relu4_3 = num(key, v)?,
            "pool_kernel" => self.pool_kernel = num(key, v)?,
            "mixup_alpha" => self.mixup_alpha = num(key, v)?,
            "mixup_beta" => self.mixup_beta = num(key, v)?,
            "k_targets" => self.k_targets = num(key, v)?,
            "train_seed" => self.train_seed = num(key, v)?,
            "target_seed" => self.target_seed = num(key, v)?,
            "classifier_warmup_steps" => self.classifier_warmup_steps = num(key, v)?,
            "step_ratio" => self.step_ratio = v.parse()?,
            "cm_backbone" => self.cm_backbone = named(key, v)?,
            "cm_weights" => self.cm_weights = path_opt(v),
            "cm_lr" => self.cm_lr = num(key, v)?,
            "cm_momentum" => self.cm_momentum = num(key, v)?,
            "aum_lr" => self.aum_lr = num(key, v)?,
            "aum_weight_decay" => self.aum_weight_decay = num(key, v)?,
            "aum_width" => self.aum_width = num(key, v)?,
            "aum_res_blocks" => self.aum_res_blocks = num(key, v)?,
            "sam_backbone" => self.sam_backbone = named(key, v)?,
            "sam_weights" => self.sam_weights = path_opt(v),
            "source_root" => self.source_root = path_opt(v),
            "target_root" => self.target_root = path_opt(v),
            "eval_root" => self.eval_root = path_opt(v),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "input_size" => self.input_size.to_string(),
            "variant" => self.variant.to_string(),
            "perceptual_mode" => self.perceptual_mode.to_string(),
            "use_rec_loss" => self.use_rec_loss.to_string(),
            "rec_on_target" => self.rec_on_target.to_string(),
            "w_relu1_2" => format!("{:?}", self.w_relu1_2),
            "w_relu2_2" => format!("{:?}", self.w_relu2_2),
            "w_relu4_3" => format!("{:?}", self.w_relu4_3),
            "pool_kernel" => self.pool_kernel.to_string(),
            "mixup_alpha" => format!("{:?}", self.mixup_alpha),
            "mixup_beta" => format!("{:?}", self.mixup_beta),
            "k_targets" => self.k_targets.to_string(),
            "train_seed" => self.train_seed.to_string(),
            "target_seed" => self.target_seed.to_string(),
            "classifier_warmup_steps" => self.classifier_warmup_steps.to_string(),
            "step_ratio" => self.step_ratio.to_string(),
            "cm_backbone" => self.cm_backbone.to_string(),
            "cm_weights" => show_path(&self.cm_weights),
            "cm_lr" => format!("{:?}", self.cm_lr),
            "cm_momentum" => format!("{:?}", self.cm_momentum),
            "aum_lr" => format!("{:?}", self.aum_lr),
            "aum_weight_decay" => format!("{:?}", self.aum_weight_decay),
            "aum_width" => self.aum_width.to_string(),
            "aum_res_blocks" => self.aum_res_blocks.to_string(),
            "sam_backbone" => self.sam_backbone.to_string(),
            "sam_weights" => show_path(&self.sam_weights),
            "source_root" => show_path(&self.source_root),
            "target_root" => show_path(&self.target_root),
            "eval_root" => show_path(&self.eval_root),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "max_steps" => self.max_steps.to_string(),
            _ => unreachable!("KEYS and get() disagree on {key}"),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
        self.set(k, v)
    }

    /// Parses a config file body on top of the defaults. `#` starts a
    /// comment; blank lines are ignored; a repeated key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key `{k}` set twice", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value, one per line, in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// Resolved key/value pairs in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|(k, _)| (k.to_string(), self.get(k))).collect()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (k, v) in [("cm_lr", self.cm_lr), ("aum_lr", self.aum_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("`{k}` must be > 0, got {v}"));
            }
        }
        for (k, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k_targets", self.k_targets),
            ("pool_kernel", self.pool_kernel),
            ("aum_width", self.aum_width),
        ] {
            if v == 0 {
                return err(format!("`{k}` must be at least 1"));
            }
        }
        if self.input_size % 8 != 0 || self.input_size < 16 {
            return err(format!("`input_size` must be a multiple of 8 and at least 16, got {}", self.input_size));
        }
        if !(0.0..1.0).contains(&self.cm_momentum) {
            return err(format!("`cm_momentum` must be in [0, 1), got {}", self.cm_momentum));
        }
        if !(self.aum_weight_decay >= 0.0) {
            return err(format!("`aum_weight_decay` must be >= 0, got {}", self.aum_weight_decay));
        }
        if self.use_rec_loss && self.variant != Variant::DisentangledEncoders {
            return err("`use_rec_loss = true` needs `variant = DE`".into());
        }
        MixupDistribution::new(self.mixup_alpha, self.mixup_beta).map_err(|e| Error::Config(e.to_string()))?;
        self.perceptual().validate()?;
        Ok(())
    }

    pub fn perceptual(&self) -> PerceptualConfig {
        let mut p = PerceptualConfig {
            mode: self.perceptual_mode,
            pool_kernel: self.pool_kernel,
            ..Default::default()
        };
        p.layer_weights.insert("relu1_2".into(), self.w_relu1_2);
        p.layer_weights.insert("relu2_2".into(), self.w_relu2_2);
        p.layer_weights.insert("relu4_3".into(), self.w_relu4_3);
        p
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        ArchitectureSpec {
            base_width: self.aum_width,
            res_blocks: self.aum_res_blocks,
        }
    }

    pub fn mixup(&self) -> Result<MixupDistribution> {
        MixupDistribution::new(self.mixup_alpha, self.mixup_beta)
    }

    /// Short configuration label in the style `DE+AvP+RL`.
    pub fn label(&self) -> String {
        let mut s = self.variant.to_string();
        if self.perceptual_mode == PerceptualMode::AvgPool {
            s.push_str("+AvP");
        }
        if self.use_rec_loss {
            s.push_str("+RL");
        }
        s
    }
}
