//! Single-file training checkpoint.
//!
//! Layout: magic `OSUDACKP`, `u32` format version, `u64` header length, a
//! JSON header, then every tensor as little-endian `f64` in header order.
//! The header records the payload's SHA-256 so truncation and bit rot are
//! caught on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::augmentation::AugmenterState;
use crate::autograd::Tensor;
use crate::classifier::{ClassifierBackbone, ClassifierState};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::optim::{AdamW, Sgd};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"OSUDACKP";
pub const FORMAT_VERSION: u32 = 1;

/// Where training stands.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub batches_done: u64,
    pub classifier_updates: u64,
    pub augmenter_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStates {
    pub shuffle: RngState,
    pub target_pick: RngState,
    pub mixup: RngState,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub progress: Progress,
    /// Source sample order of the current epoch.
    pub epoch_order: Vec<usize>,
    pub rng: RngStates,
    pub aum: AugmenterState,
    pub cm: ClassifierState,
    pub cm_opt: Sgd,
    pub aum_opt: AdamW,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    backbone: ClassifierBackbone,
    num_classes: usize,
    input_size: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct SgdHeader {
    lr: f64,
    momentum: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_text: String,
    config_digest: String,
    progress: Progress,
    epoch_order: Vec<usize>,
    rng: RngStates,
    classifier: ClassifierHeader,
    cm_optimizer: SgdHeader,
    aum_optimizer: AdamHeader,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

struct Payload {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl Payload {
    fn push(&mut self, group: &str, name: &str, t: &Tensor) {
        self.entries.push(TensorEntry {
            group: group.into(),
            name: name.into(),
            shape: t.shape().to_vec(),
            offset: (self.bytes.len() / 8) as u64,
        });
        for v in t.iter() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn module(&mut self, group: &str, m: &dyn Module) {
        m.visit(&mut |p| self.push(group, &p.name, &p.value));
    }

    fn map(&mut self, group: &str, m: &BTreeMap<String, Tensor>) {
        for (k, t) in m {
            self.push(group, k, t);
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Payload {
            entries: Vec::new(),
            bytes: Vec::new(),
        };
        p.module("aum", &self.aum);
        p.module("cm", &self.cm);
        p.map("cm_opt.velocity", &self.cm_opt.velocity);
        p.map("aum_opt.m", &self.aum_opt.m);
        p.map("aum_opt.v", &self.aum_opt.v);
        let header = Header {
            config_text: self.config.to_text(),
            config_digest: self.config.digest(),
            progress: self.progress,
            epoch_order: self.epoch_order.clone(),
            rng: self.rng.clone(),
            classifier: ClassifierHeader {
                backbone: self.cm.backbone(),
                num_classes: self.cm.num_classes(),
                input_size: self.cm.input_size(),
            },
            cm_optimizer: SgdHeader {
                lr: self.cm_opt.lr,
                momentum: self.cm_opt.momentum,
            },
            aum_optimizer: AdamHeader {
                lr: self.aum_opt.lr,
                beta1: self.aum_opt.beta1,
                beta2: self.aum_opt.beta2,
                eps: self.aum_opt.eps,
                weight_decay: self.aum_opt.weight_decay,
                t: self.aum_opt.t,
            },
            tensors: p.entries,
            payload_sha256: hex::encode(Sha256::digest(&p.bytes)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + p.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&p.bytes);
        out
    }

    /// Writes to a sibling temporary file first, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::path(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::path(&tmp, e))?;
        f.sync_all().map_err(|e| Error::path(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::checkpoint("magic", "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(Error::checkpoint("header_length", format!("{hlen} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| {
            let field = e.to_string().split('`').nth(1).unwrap_or("header").to_string();
            Error::checkpoint(field, e.to_string())
        })?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::checkpoint("payload_sha256", "payload does not match its digest"));
        }

        let config = TrainConfig::parse(&header.config_text)
            .map_err(|e| Error::checkpoint("config_text", e.to_string()))?;
        if config.digest() != header.config_digest {
            return Err(Error::checkpoint("config_digest", "does not match config_text"));
        }

        let mut groups: BTreeMap<&str, BTreeMap<&str, Tensor>> = BTreeMap::new();
        let total = payload.len() / 8;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            if start + n > total {
                return Err(Error::checkpoint(format!("tensors.{}", t.name), "extends past the payload"));
            }
            let data: Vec<f64> = payload[start * 8..(start + n) * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let arr = Tensor::from_shape_vec(ndarray::IxDyn(&t.shape), data).expect("length checked");
            groups.entry(t.group.as_str()).or_default().insert(t.name.as_str(), arr);
        }
        let mut take = |g: &str| groups.remove(g).unwrap_or_default();

        let mut aum = AugmenterState::new(config.variant, config.architecture(), 0);
        fill(&mut aum, "aum", take("aum"))?;
        let c = &header.classifier;
        let mut cm = ClassifierState::new(c.backbone, c.num_classes, c.input_size, 0)
            .map_err(|e| Error::checkpoint("classifier", e.to_string()))?;
        fill(&mut cm, "cm", take("cm"))?;

        let owned = |m: BTreeMap<&str, Tensor>| m.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut cm_opt = Sgd::new(header.cm_optimizer.lr, header.cm_optimizer.momentum);
        cm_opt.velocity = owned(take("cm_opt.velocity"));
        let a = &header.aum_optimizer;
        let mut aum_opt = AdamW::new(a.lr, a.weight_decay);
        aum_opt.beta1 = a.beta1;
        aum_opt.beta2 = a.beta2;
        aum_opt.eps = a.eps;
        aum_opt.t = a.t;
        aum_opt.m = owned(take("aum_opt.m"));
        aum_opt.v = owned(take("aum_opt.v"));
        if let Some(g) = groups.keys().next() {
            return Err(Error::checkpoint(format!("tensors.{g}"), "unknown tensor group"));
        }

        Ok(Checkpoint {
            config,
            progress: header.progress,
            epoch_order: header.epoch_order,
            rng: header.rng,
            aum,
            cm,
            cm_opt,
            aum_opt,
        })
    }
}

/// Overwrites every parameter of `m` from `tensors`, which must match
/// exactly by name and shape.
fn fill(m: &mut dyn Module, group: &str, mut tensors: BTreeMap<&str, Tensor>) -> Result<()> {
    let mut err = None;
    m.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match tensors.remove(p.name.as_str()) {
            Some(t) if t.shape() == p.shape() => *p.value_mut() = t,
            Some(t) => {
                err = Some(Error::checkpoint(
                    format!("{group}.{}", p.name),
                    format!("shape {:?}, model expects {:?}", t.shape(), p.shape()),
                ))
            }
            None => err = Some(Error::checkpoint(format!("{group}.{}", p.name), "missing")),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(k) = tensors.keys().next() {
        return Err(Error::checkpoint(format!("{group}.{k}"), "not part of the model"));
    }
    Ok(())
}
