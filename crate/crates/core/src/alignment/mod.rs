//! Style alignment: a frozen feature extractor and the perceptual losses
//! computed on its activations.

mod losses;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu_gain, Conv2d, Module, Padding, Param};
use crate::{rng, weights};

pub use losses::{
    avgpool_layer_loss, content_layer_loss, gram_matrix, perceptual_loss, perceptual_loss_avp,
    perceptual_loss_gram, style_layer_loss, FeatureMap, GramMatrix, PerceptualConfig, PerceptualLoss,
    PerceptualMode,
};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// VGG-16 `features` up to `relu4_3`; `0` marks a 2×2 max pool.
const VGG16_WIDTHS: [usize; 13] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512];
/// Same topology, narrow enough to run anywhere.
const TINY_WIDTHS: [usize; 13] = [16, 16, 0, 32, 32, 0, 32, 32, 32, 0, 64, 64, 64];
const TINY_SEED: u64 = 0x5EED_0A11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamBackbone {
    #[serde(rename = "vgg16")]
    Vgg16,
    #[serde(rename = "tiny")]
    Tiny,
}

impl fmt::Display for SamBackbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamBackbone::Vgg16 => "vgg16",
            SamBackbone::Tiny => "tiny",
        })
    }
}

impl FromStr for SamBackbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(SamBackbone::Vgg16),
            "tiny" => Ok(SamBackbone::Tiny),
            _ => Err(Error::Config(format!("unknown feature extractor `{s}` (expected vgg16 or tiny)"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Conv { conv: Conv2d, tap: String },
    Pool,
}

/// Frozen VGG-style network exposing named ReLU outputs (`relu1_1` …
/// `relu4_3`). Parameters are never bound as gradient leaves.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    backbone: SamBackbone,
    stages: Vec<Stage>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl FeatureExtractor {
    fn build(backbone: SamBackbone, widths: &[usize], seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::SAM_INIT);
        let mut stages = Vec::new();
        let (mut in_c, mut block, mut idx) = (3, 1, 1);
        for (i, &w) in widths.iter().enumerate() {
            if w == 0 {
                stages.push(Stage::Pool);
                block += 1;
                idx = 1;
                continue;
            }
            // torchvision index: each conv is followed by its ReLU
            let torch_idx = i + widths[..i].iter().filter(|&&v| v != 0).count();
            let mut conv = Conv2d::new(
                &format!("sam.features.{torch_idx}"),
                in_c,
                w,
                3,
                1,
                1,
                Padding::Zero,
                true,
                leaky_relu_gain(0.0),
                &mut rng,
            );
            conv.weight.trainable = false;
            if let Some(b) = conv.bias.as_mut() {
                b.trainable = false;
            }
            stages.push(Stage::Conv {
                conv,
                tap: format!("relu{block}_{idx}"),
            });
            in_c = w;
            idx += 1;
        }
        FeatureExtractor {
            backbone,
            stages,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Randomly initialized frozen extractor with the VGG tap-point names.
    pub fn tiny() -> Self {
        Self::build(SamBackbone::Tiny, &TINY_WIDTHS, TINY_SEED)
    }

    /// VGG-16 with weights from a torchvision-keyed safetensors file.
    pub fn vgg16(weights_path: &Path) -> Result<Self> {
        let mut fe = Self::build(SamBackbone::Vgg16, &VGG16_WIDTHS, 0);
        let w = weights::load_safetensors(weights_path)?;
        weights::assign(&mut fe, &w, "sam.", |_| false)?;
        Ok(fe)
    }

    /// Resolves the configured backbone. A VGG-16 request without a readable
    /// weight file falls back to [`FeatureExtractor::tiny`] and returns the
    /// reason as a warning.
    pub fn load(backbone: SamBackbone, weights_path: Option<&Path>) -> Result<(Self, Option<String>)> {
        match (backbone, weights_path) {
            (SamBackbone::Tiny, _) => Ok((Self::tiny(), None)),
            (SamBackbone::Vgg16, Some(p)) if p.exists() => Ok((Self::vgg16(p)?, None)),
            (SamBackbone::Vgg16, p) => {
                let why = match p {
                    Some(p) => format!("weight file {} not found", p.display()),
                    None => "no weight file configured".to_string(),
                };
                Ok((
                    Self::tiny(),
                    Some(format!("vgg16 requested but {why}; using the tiny random frozen extractor")),
                ))
            }
        }
    }

    pub fn backbone(&self) -> SamBackbone {
        self.backbone
    }

    pub fn tap_points(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { tap, .. } => Some(tap.as_str()),
                Stage::Pool => None,
            })
            .collect()
    }

    pub fn channels_at(&self, layer: &str) -> Option<usize> {
        self.stages.iter().find_map(|s| match s {
            Stage::Conv { conv, tap } if tap == layer => Some(conv.out_channels()),
            _ => None,
        })
    }

    /// Normalizes `x` (values in `[0, 1]`) and returns the requested ReLU
    /// outputs in request order.
    pub fn extract_features(&self, g: &mut Graph, x: &Var, layers: &[&str]) -> Result<Vec<Var>> {
        let taps = self.tap_points();
        for l in layers {
            if !taps.contains(l) {
                return Err(Error::Validation(format!("unknown feature layer `{l}`")));
            }
        }
        let scale: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self.mean.iter().zip(&self.std).map(|(m, s)| -m / s).collect();
        let mut h = g.channel_affine(x, &scale, &shift)?;
        let mut found: Vec<Option<Var>> = vec![None; layers.len()];
        let mut remaining = layers.len();
        for stage in &self.stages {
            if remaining == 0 {
                break;
            }
            match stage {
                Stage::Pool => h = g.maxpool2d(&h, 2, 2, 0)?,
                Stage::Conv { conv, tap } => {
                    let pre = conv.forward(g, &h)?;
                    h = g.relu(&pre);
                    for (slot, l) in found.iter_mut().zip(layers) {
                        if slot.is_none() && *l == tap {
                            *slot = Some(h.clone());
                            remaining -= 1;
                        }
                    }
                }
            }
        }
        Ok(found.into_iter().map(|v| v.expect("all layers found")).collect())
    }

    pub fn extract(&self, x: &ImageBatch, layers: &[&str]) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.to_tensor());
        let maps = self.extract_features(&mut g, &xv, layers)?;
        Ok(maps
            .into_iter()
            .zip(layers)
            .map(|(v, l)| FeatureMap {
                data: v.into_tensor().into_dimensionality::<ndarray::Ix4>().expect("rank 4"),
                layer_name: l.to_string(),
            })
            .collect())
    }
}

impl Module for FeatureExtractor {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for s in &self.stages {
            if let Stage::Conv { conv, .. } = s {
                conv.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.stages {
            if let Stage::Conv { conv, .. } = s {
                conv.visit_mut(f);
            }
        }
    }
}

impl FeatureMap {
    pub fn new(data: Array4<f64>, layer_name: impl Into<String>) -> Self {
        FeatureMap {
            data,
            layer_name: layer_name.into(),
        }
    }
}
