//! The classifier: a pluggable convolutional backbone with a K-way head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use crate::alignment::{IMAGENET_MEAN, IMAGENET_STD};
use crate::autograd::{BatchStats, Graph, Var};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, leaky_relu_gain, BatchNorm2d, Conv2d, Linear, Module, Padding, Param};
use crate::{rng, weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierBackbone {
    /// Three conv layers and the head; for desk-scale runs.
    #[serde(rename = "small_cnn")]
    SmallCnn,
    #[serde(rename = "resnet50")]
    ResNet50,
    #[serde(rename = "resnet101")]
    ResNet101,
}

impl fmt::Display for ClassifierBackbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierBackbone::SmallCnn => "small_cnn",
            ClassifierBackbone::ResNet50 => "resnet50",
            ClassifierBackbone::ResNet101 => "resnet101",
        })
    }
}

impl FromStr for ClassifierBackbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(ClassifierBackbone::SmallCnn),
            "resnet50" => Ok(ClassifierBackbone::ResNet50),
            "resnet101" => Ok(ClassifierBackbone::ResNet101),
            _ => Err(Error::Config(format!(
                "unknown classifier backbone `{s}` (expected small_cnn, resnet50 or resnet101)"
            ))),
        }
    }
}

/// Batch-norm statistics gathered by a training-mode forward pass, applied to
/// the running estimates once the step succeeds.
#[derive(Debug, Clone, Default)]
pub struct BnUpdates(Vec<BatchStats>);

/// Collects stats in forward order; `train == false` collects nothing.
struct Ctx<'a> {
    g: &'a mut Graph,
    train: bool,
    stats: Vec<BatchStats>,
}

impl Ctx<'_> {
    fn bn(&mut self, bn: &BatchNorm2d, x: &Var) -> Result<Var> {
        let (y, s) = bn.forward(self.g, x, self.train)?;
        self.stats.extend(s);
        Ok(y)
    }
}

fn resnet_conv(name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Conv2d {
    // fan-out normal, as torchvision initializes its ResNets
    let shape = [out_c, in_c, k, k];
    Conv2d {
        weight: Param::new(format!("{name}.weight"), kaiming_normal(&shape, out_c * k * k, 2f64.sqrt(), rng)),
        bias: None,
        stride,
        pad: k / 2,
        padding: Padding::Zero,
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(name: &str, in_c: usize, width: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let out_c = width * 4;
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            let mut c = resnet_conv(&format!("{name}.downsample.0"), in_c, out_c, 1, stride, rng);
            c.pad = 0;
            (c, BatchNorm2d::new(&format!("{name}.downsample.1"), out_c))
        });
        Bottleneck {
            conv1: resnet_conv(&format!("{name}.conv1"), in_c, width, 1, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), width),
            conv2: resnet_conv(&format!("{name}.conv2"), width, width, 3, stride, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), width),
            conv3: resnet_conv(&format!("{name}.conv3"), width, out_c, 1, 1, rng),
            bn3: BatchNorm2d::new(&format!("{name}.bn3"), out_c),
            downsample,
        }
    }

    fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(cx.g, x)?;
        let h = cx.bn(&self.bn1, &h)?;
        let h = cx.g.relu(&h);
        let h = self.conv2.forward(cx.g, &h)?;
        let h = cx.bn(&self.bn2, &h)?;
        let h = cx.g.relu(&h);
        let h = self.conv3.forward(cx.g, &h)?;
        let h = cx.bn(&self.bn3, &h)?;
        let skip = match &self.downsample {
            Some((c, bn)) => {
                let s = c.forward(cx.g, x)?;
                cx.bn(bn, &s)?
            }
            None => x.clone(),
        };
        let y = cx.g.add(&h, &skip)?;
        Ok(cx.g.relu(&y))
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.bn1, &mut self.bn2, &mut self.bn3];
        if let Some((_, bn)) = &mut self.downsample {
            v.push(bn);
        }
        v
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        self.conv3.visit(f);
        self.bn3.visit(f);
        if let Some((c, bn)) = &self.downsample {
            c.visit(f);
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        self.conv3.visit_mut(f);
        self.bn3.visit_mut(f);
        if let Some((c, bn)) = &mut self.downsample {
            c.visit_mut(f);
            bn.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
enum Body {
    Small {
        convs: [Conv2d; 3],
    },
    ResNet {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        layers: Vec<Vec<Bottleneck>>,
    },
}

impl Body {
    fn small(rng: &mut rand_chacha::ChaCha8Rng) -> (Self, usize) {
        let gain = leaky_relu_gain(0.0);
        let c = |name: &str, i, o, rng: &mut _| Conv2d::new(name, i, o, 3, 1, 1, Padding::Zero, true, gain, rng);
        let convs = [c("cm.conv1", 3, 16, rng), c("cm.conv2", 16, 32, rng), c("cm.conv3", 32, 64, rng)];
        (Body::Small { convs }, 64)
    }

    fn resnet(blocks: [usize; 4], rng: &mut rand_chacha::ChaCha8Rng) -> (Self, usize) {
        let mut conv1 = resnet_conv("cm.conv1", 3, 64, 7, 2, rng);
        conv1.pad = 3;
        let mut in_c = 64;
        let mut layers = Vec::new();
        for (li, &n) in blocks.iter().enumerate() {
            let width = 64 << li;
            let stride = if li == 0 { 1 } else { 2 };
            let layer: Vec<Bottleneck> = (0..n)
                .map(|bi| {
                    let b = Bottleneck::new(
                        &format!("cm.layer{}.{bi}", li + 1),
                        in_c,
                        width,
                        if bi == 0 { stride } else { 1 },
                        rng,
                    );
                    in_c = width * 4;
                    b
                })
                .collect();
            layers.push(layer);
        }
        (
            Body::ResNet {
                conv1,
                bn1: BatchNorm2d::new("cm.bn1", 64),
                layers,
            },
            in_c,
        )
    }

    /// Pooled features `[N, F]`.
    fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        match self {
            Body::Small { convs } => {
                let mut h = x.clone();
                for (i, c) in convs.iter().enumerate() {
                    let pre = c.forward(cx.g, &h)?;
                    h = cx.g.relu(&pre);
                    if i < 2 {
                        h = cx.g.maxpool2d(&h, 2, 2, 0)?;
                    }
                }
                cx.g.global_avg_pool(&h)
            }
            Body::ResNet { conv1, bn1, layers } => {
                let h = conv1.forward(cx.g, x)?;
                let h = cx.bn(bn1, &h)?;
                let h = cx.g.relu(&h);
                let mut h = cx.g.maxpool2d(&h, 3, 2, 1)?;
                for b in layers.iter().flatten() {
                    h = b.forward(cx, &h)?;
                }
                cx.g.global_avg_pool(&h)
            }
        }
    }

    /// Batch norms in the order their stats are produced by `forward`.
    fn bns_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        match self {
            Body::Small { .. } => Vec::new(),
            Body::ResNet { bn1, layers, .. } => {
                let mut v = vec![bn1];
                for b in layers.iter_mut().flatten() {
                    v.extend(b.bns_mut());
                }
                v
            }
        }
    }
}

impl Module for Body {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Body::Small { convs } => convs.iter().for_each(|c| c.visit(f)),
            Body::ResNet { conv1, bn1, layers } => {
                conv1.visit(f);
                bn1.visit(f);
                layers.iter().flatten().for_each(|b| b.visit(f));
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Body::Small { convs } => convs.iter_mut().for_each(|c| c.visit_mut(f)),
            Body::ResNet { conv1, bn1, layers } => {
                conv1.visit_mut(f);
                bn1.visit_mut(f);
                layers.iter_mut().flatten().for_each(|b| b.visit_mut(f));
            }
        }
    }
}

/// Backbone plus a K-way linear head. Inputs are images in `[0, 1]`;
/// ImageNet normalization happens inside the forward pass.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    backbone: ClassifierBackbone,
    body: Body,
    head: Linear,
    num_classes: usize,
    input_size: usize,
}

impl ClassifierState {
    /// Randomly initialized network; the head is always fresh.
    pub fn new(backbone: ClassifierBackbone, num_classes: usize, input_size: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!("classifier needs at least 2 classes, got {num_classes}")));
        }
        let min = match backbone {
            ClassifierBackbone::SmallCnn => 4,
            _ => 32,
        };
        if input_size < min {
            return Err(Error::Validation(format!("{backbone} needs input_size >= {min}, got {input_size}")));
        }
        let mut rng = rng::stream(seed, rng::CM_INIT);
        let (body, features) = match backbone {
            ClassifierBackbone::SmallCnn => Body::small(&mut rng),
            ClassifierBackbone::ResNet50 => Body::resnet([3, 4, 6, 3], &mut rng),
            ClassifierBackbone::ResNet101 => Body::resnet([3, 4, 23, 3], &mut rng),
        };
        Ok(ClassifierState {
            backbone,
            body,
            head: Linear::new("cm.fc", features, num_classes, &mut rng),
            num_classes,
            input_size,
        })
    }

    /// Like [`ClassifierState::new`], then copies backbone weights from a
    /// torchvision-keyed safetensors file. The file's `fc.*` head is ignored.
    pub fn pretrained(
        backbone: ClassifierBackbone,
        num_classes: usize,
        input_size: usize,
        seed: u64,
        weights_path: &Path,
    ) -> Result<Self> {
        let mut cm = Self::new(backbone, num_classes, input_size, seed)?;
        let w = weights::load_safetensors(weights_path)?;
        weights::assign(&mut cm.body, &w, "cm.", |_| false)?;
        Ok(cm)
    }

    /// Resolves a backbone request. Missing weight files for a ResNet fall
    /// back to random initialization and return the reason as a warning.
    pub fn load(
        backbone: ClassifierBackbone,
        num_classes: usize,
        input_size: usize,
        seed: u64,
        weights_path: Option<&Path>,
    ) -> Result<(Self, Option<String>)> {
        match (backbone, weights_path) {
            (_, Some(p)) if p.exists() => Ok((Self::pretrained(backbone, num_classes, input_size, seed, p)?, None)),
            (ClassifierBackbone::SmallCnn, None) => Ok((Self::new(backbone, num_classes, input_size, seed)?, None)),
            (_, p) => {
                let why = match p {
                    Some(p) => format!("weight file {} not found", p.display()),
                    None => "no weight file configured".to_string(),
                };
                Ok((
                    Self::new(backbone, num_classes, input_size, seed)?,
                    Some(format!("{backbone}: {why}; using random initialization")),
                ))
            }
        }
    }

    /// Replaces the head with an all-zero one.
    pub fn zero_head(&mut self) {
        let f = self.head.weight.shape()[1];
        self.head = Linear::zeroed("cm.fc", f, self.num_classes);
    }

    pub fn backbone(&self) -> ClassifierBackbone {
        self.backbone
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Logits `[N, K]`. In training mode batch norms use batch statistics,
    /// returned for [`ClassifierState::apply_bn_updates`].
    pub fn forward(&self, g: &mut Graph, x: &Var, train: bool) -> Result<(Var, BnUpdates)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(Error::Shape(format!(
                "classifier expects [N, 3, {n}, {n}], got {s:?}",
                n = self.input_size
            )));
        }
        let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
        let h = g.channel_affine(x, &scale, &shift)?;
        let mut cx = Ctx {
            g,
            train,
            stats: Vec::new(),
        };
        let feats = self.body.forward(&mut cx, &h)?;
        let stats = std::mem::take(&mut cx.stats);
        let logits = self.head.forward(g, &feats)?;
        Ok((logits, BnUpdates(stats)))
    }

    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        let bns = self.body.bns_mut();
        debug_assert!(updates.0.is_empty() || updates.0.len() == bns.len());
        for (bn, s) in bns.into_iter().zip(&updates.0) {
            bn.update_running(s);
        }
    }

    /// Eval-mode logits `[N, K]`.
    pub fn classify(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.to_tensor());
        let (logits, _) = self.forward(&mut g, &xv, false)?;
        Ok(logits.into_tensor().into_dimensionality::<Ix2>().expect("rank 2"))
    }

    /// Argmax class per sample; ties go to the lowest index.
    pub fn predict(&self, x: &ImageBatch) -> Result<Vec<usize>> {
        let logits = self.classify(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }
}

impl Module for ClassifierState {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.body.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// One-hot targets, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch(Array2<f64>);

impl LabelBatch {
    pub fn new(one_hot: Array2<f64>) -> Result<Self> {
        for (i, row) in one_hot.rows().into_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!("label row {i} is not one-hot")));
            }
        }
        Ok(LabelBatch(one_hot))
    }

    pub fn from_indices(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut y = Array2::zeros((labels.len(), num_classes));
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Validation(format!("label {l} out of range for {num_classes} classes")));
            }
            y[[i, l]] = 1.0;
        }
        Ok(LabelBatch(y))
    }

    pub fn one_hot(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.0.ncols()
    }
}

/// Batch mean of `-log softmax(logits)[true class]`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &LabelBatch) -> Result<f64> {
    let mut g = Graph::inference();
    let l = g.constant(logits.clone().into_dyn());
    Ok(g.cross_entropy(&l, labels.one_hot())?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn images(n: usize, size: usize, phase: f64) -> ImageBatch {
        let data = Array4::from_shape_fn((n, 3, size, size), |(i, c, y, x)| {
            0.5 + 0.45 * ((i * 7 + c * 3 + y * 2 + x) as f64 * 0.37 + phase).sin()
        });
        ImageBatch::new(data, None).unwrap()
    }

    #[test]
    fn head_width_and_logit_shape() {
        let cm = ClassifierState::new(ClassifierBackbone::SmallCnn, 345, 16, 0).unwrap();
        assert_eq!(cm.classify(&images(8, 16, 0.0)).unwrap().shape(), &[8, 345]);
        assert!(ClassifierState::new(ClassifierBackbone::SmallCnn, 1, 16, 0).is_err());
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let cm = ClassifierState::new(ClassifierBackbone::SmallCnn, 3, 16, 0).unwrap();
        assert!(matches!(cm.classify(&images(1, 20, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_equal_logits() {
        let mut cm = ClassifierState::new(ClassifierBackbone::SmallCnn, 5, 16, 0).unwrap();
        cm.zero_head();
        let l = cm.classify(&images(3, 16, 0.4)).unwrap();
        for r in l.rows() {
            assert!(r.iter().all(|&v| v == r[0]));
        }
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let cm = ClassifierState::new(ClassifierBackbone::SmallCnn, 4, 16, 3).unwrap();
        let x = images(2, 16, 1.0);
        assert_eq!(cm.classify(&x).unwrap(), cm.classify(&x).unwrap());
    }

    #[test]
    fn resnet50_layout_matches_torchvision() {
        let cm = ClassifierState::new(ClassifierBackbone::ResNet50, 10, 32, 0).unwrap();
        let n: usize = {
            let mut n = 0;
            cm.visit(&mut |p| {
                if p.trainable && !p.name.starts_with("cm.fc") {
                    n += p.value.len()
                }
            });
            n
        };
        // torchvision resnet50 minus its 1000-way fc
        assert_eq!(n, 25_557_032 - 2048 * 1000 - 1000);
        assert!(cm.find("cm.layer4.2.bn3.running_var").is_some());
        assert!(cm.find("cm.layer1.0.downsample.0.weight").is_some());
        assert!(cm.find("cm.layer2.1.downsample.0.weight").is_none());
    }

    #[test]
    fn resnet_train_forward_updates_running_stats() {
        let mut cm = ClassifierState::new(ClassifierBackbone::ResNet50, 3, 32, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2, 32, 0.0).to_tensor());
        let (logits, upd) = cm.forward(&mut g, &x, true).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(upd.0.len(), 1 + 16 * 3 + 4);
        let before = cm.find("cm.bn1.running_mean").unwrap().value;
        cm.apply_bn_updates(&upd);
        assert_ne!(cm.find("cm.bn1.running_mean").unwrap().value, before);
    }

    #[test]
    fn pretrained_load_ignores_head() {
        let dir = tempfile::tempdir().unwrap();
        let cm = ClassifierState::new(ClassifierBackbone::SmallCnn, 3, 16, 9).unwrap();
        let mut views_data = Vec::new();
        cm.visit(&mut |p| {
            if !p.name.starts_with("cm.fc") {
                let bytes: Vec<u8> = p.value.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
                views_data.push((p.name.trim_start_matches("cm.").to_string(), p.shape().to_vec(), bytes));
            }
        });
        let views: Vec<_> = views_data
            .iter()
            .map(|(n, s, b)| (n.clone(), safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        let path = dir.path().join("small.safetensors");
        safetensors::serialize_to_file(views, &None, &path).unwrap();

        let (loaded, warn) = ClassifierState::load(ClassifierBackbone::SmallCnn, 7, 16, 1, Some(&path)).unwrap();
        assert!(warn.is_none());
        assert_eq!(loaded.num_classes(), 7);
        let w = loaded.find("cm.conv2.weight").unwrap().value;
        let orig = cm.find("cm.conv2.weight").unwrap().value;
        assert!(w.iter().zip(orig.iter()).all(|(a, b)| *a == (*b as f32) as f64));

        let (_, warn) = ClassifierState::load(ClassifierBackbone::ResNet50, 7, 32, 1, None).unwrap();
        assert!(warn.unwrap().contains("resnet50"));
    }

    #[test]
    fn label_batch_rows_are_one_hot() {
        let y = LabelBatch::from_indices(&[0, 2, 1], 3).unwrap();
        assert!(y.one_hot().rows().into_iter().all(|r| r.sum() == 1.0));
        assert!(LabelBatch::from_indices(&[3], 3).is_err());
        assert!(LabelBatch::new(ndarray::arr2(&[[0.5, 0.5]])).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let y = LabelBatch::from_indices(&[4, 0], 10).unwrap();
        let l = Array2::from_elem((2, 10), 3.7);
        assert!((cross_entropy(&l, &y).unwrap() - 10f64.ln()).abs() < 1e-12);
    }
}
