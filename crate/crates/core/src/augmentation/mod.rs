//! The augmentation module: an encoder-decoder that re-renders a source image
//! in the style of a target image.
//!
//! Two variants share the same encoder and decoder blocks:
//!
//! * **SE** (shared encoder) encodes source and target with one encoder and
//!   mixes the embeddings, `λ·z_s + (1−λ)·z_t`, before decoding.
//! * **DE** (disentangled encoders) encodes the target with a style encoder
//!   and the source with a content encoder, concatenates both embeddings and
//!   fuses them with a 7×7 bottleneck convolution before decoding.

mod mixup;

use std::fmt;
use std::str::FromStr;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu_gain, Conv2d, Module, Padding, Param};
use crate::rng;

pub use mixup::{mixup_embeddings, MixupDistribution};

/// Total spatial reduction of the encoder (three stride-2 convolutions).
pub const ENCODER_STRIDE: usize = 8;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SE")]
    SharedEncoder,
    #[serde(rename = "DE")]
    DisentangledEncoders,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SharedEncoder => "SE",
            Variant::DisentangledEncoders => "DE",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SE" => Ok(Variant::SharedEncoder),
            "DE" => Ok(Variant::DisentangledEncoders),
            _ => Err(Error::Config(format!("unknown augmenter variant `{s}` (expected SE or DE)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Shared,
    Style,
    Content,
}

/// Layer widths of the augmentation network. The full network uses a base
/// width of 64 (64/128/256 channels); the miniature one uses 4 (4/8/16) and
/// keeps every structural property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub base_width: usize,
    pub res_blocks: usize,
}

impl ArchitectureSpec {
    pub const fn full() -> Self {
        ArchitectureSpec {
            base_width: 64,
            res_blocks: 4,
        }
    }

    pub const fn miniature() -> Self {
        ArchitectureSpec {
            base_width: 4,
            res_blocks: 4,
        }
    }

    pub fn embedding_channels(&self) -> usize {
        4 * self.base_width
    }
}

/// `x + conv(lrelu(conv(x)))`, shape preserving.
///
/// The branch's second conv starts at `1/sqrt(blocks)` of the usual gain so a
/// stack of `blocks` residual blocks grows activations only mildly at
/// initialization (no normalization layers here).
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    fn new(name: &str, c: usize, padding: Padding, blocks: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        let branch_gain = gain / (blocks.max(1) as f64).sqrt();
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), c, c, 3, 1, 1, padding, true, gain, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, 1, padding, true, branch_gain, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.leaky_relu(&h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, &h)?;
        g.add(x, &h)
    }
}

impl Module for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub res: Vec<ResBlock>,
}

impl Encoder {
    fn new(name: &str, spec: &ArchitectureSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let c = spec.base_width;
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        let z = Padding::Zero;
        Encoder {
            convs: vec![
                Conv2d::new(&format!("{name}.conv0"), 3, c, 7, 2, 3, z, true, gain, rng),
                Conv2d::new(&format!("{name}.conv1"), c, 2 * c, 4, 2, 1, z, true, gain, rng),
                Conv2d::new(&format!("{name}.conv2"), 2 * c, 4 * c, 4, 2, 1, z, true, gain, rng),
            ],
            res: (0..spec.res_blocks)
                .map(|i| ResBlock::new(&format!("{name}.res{i}"), 4 * c, z, spec.res_blocks, rng))
                .collect(),
        }
    }

    fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(g, &h)?;
            h = g.leaky_relu(&h, LEAKY_SLOPE);
        }
        for block in &self.res {
            h = block.forward(g, &h)?;
        }
        Ok(h)
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.convs.iter().for_each(|c| c.visit(f));
        self.res.iter().for_each(|r| r.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
        self.res.iter_mut().for_each(|r| r.visit_mut(f));
    }
}

/// Residual blocks, two (×2 bilinear upsample, conv, LeakyReLU) stages, a
/// final upsample to the requested size and a sigmoid output conv. All
/// decoder convs pad by reflection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub res: Vec<ResBlock>,
    pub up: Vec<Conv2d>,
    pub out: Conv2d,
}

impl Decoder {
    fn new(name: &str, spec: &ArchitectureSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let c = spec.base_width;
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        let r = Padding::Reflect;
        Decoder {
            res: (0..spec.res_blocks)
                .map(|i| ResBlock::new(&format!("{name}.res{i}"), 4 * c, r, spec.res_blocks, rng))
                .collect(),
            up: vec![
                Conv2d::new(&format!("{name}.up0"), 4 * c, 2 * c, 3, 1, 1, r, true, gain, rng),
                Conv2d::new(&format!("{name}.up1"), 2 * c, 2 * c, 3, 1, 1, r, true, gain, rng),
            ],
            out: Conv2d::new(&format!("{name}.out"), 2 * c, 3, 3, 1, 1, r, true, 1.0, rng),
        }
    }

    fn forward(&self, g: &mut Graph, z: &Var, out_hw: (usize, usize)) -> Result<Var> {
        let mut h = z.clone();
        for block in &self.res {
            h = block.forward(g, &h)?;
        }
        for conv in &self.up {
            let (hh, ww) = (h.shape()[2], h.shape()[3]);
            h = g.upsample_bilinear(&h, (2 * hh, 2 * ww))?;
            h = conv.forward(g, &h)?;
            h = g.leaky_relu(&h, LEAKY_SLOPE);
        }
        h = g.upsample_bilinear(&h, out_hw)?;
        let logits = self.out.forward(g, &h)?;
        Ok(g.sigmoid(&logits))
    }
}

impl Module for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.res.iter().for_each(|r| r.visit(f));
        self.up.iter().for_each(|c| c.visit(f));
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.res.iter_mut().for_each(|r| r.visit_mut(f));
        self.up.iter_mut().for_each(|c| c.visit_mut(f));
        self.out.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub enum Encoders {
    Shared(Encoder),
    Disentangled {
        style: Encoder,
        content: Encoder,
        bottleneck: Conv2d,
    },
}

/// Learnable state of the augmentation module.
#[derive(Debug, Clone)]
pub struct AugmenterState {
    pub spec: ArchitectureSpec,
    pub variant: Variant,
    pub encoders: Encoders,
    pub decoder: Decoder,
}

/// Encoder output `[batch, 4·base_width, h/8, w/8]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Array4<f64>);

fn to_array4(v: Var) -> Array4<f64> {
    v.into_tensor().into_dimensionality().expect("rank-4 var")
}

impl AugmenterState {
    pub fn new(variant: Variant, spec: ArchitectureSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::AUM_INIT);
        let encoders = match variant {
            Variant::SharedEncoder => Encoders::Shared(Encoder::new("aum.encoder", &spec, &mut rng)),
            Variant::DisentangledEncoders => {
                let c = spec.embedding_channels();
                Encoders::Disentangled {
                    style: Encoder::new("aum.style_encoder", &spec, &mut rng),
                    content: Encoder::new("aum.content_encoder", &spec, &mut rng),
                    bottleneck: Conv2d::new(
                        "aum.bottleneck",
                        2 * c,
                        c,
                        7,
                        1,
                        3,
                        Padding::Zero,
                        true,
                        leaky_relu_gain(0.0),
                        &mut rng,
                    ),
                }
            }
        };
        AugmenterState {
            spec,
            variant,
            encoders,
            decoder: Decoder::new("aum.decoder", &spec, &mut rng),
        }
    }

    fn check_input(x: &Var) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("augmenter input must be [N, 3, H, W], got {s:?}")));
        }
        if s[2] % ENCODER_STRIDE != 0 || s[3] % ENCODER_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input size {}x{} is not divisible by {ENCODER_STRIDE}",
                s[2], s[3]
            )));
        }
        Ok((s[2], s[3]))
    }

    pub fn encode(&self, g: &mut Graph, x: &Var, which: EncoderKind) -> Result<Var> {
        Self::check_input(x)?;
        let enc = match (&self.encoders, which) {
            (Encoders::Shared(e), EncoderKind::Shared) => e,
            (Encoders::Disentangled { style, .. }, EncoderKind::Style) => style,
            (Encoders::Disentangled { content, .. }, EncoderKind::Content) => content,
            _ => {
                return Err(Error::Usage(format!(
                    "{which:?} encoder is not part of the {} variant",
                    self.variant
                )))
            }
        };
        enc.forward(g, x)
    }

    /// Concatenates `[style, content]` along channels and applies the
    /// bottleneck conv + ReLU. A style batch of one is broadcast.
    pub fn fuse_bottleneck(&self, g: &mut Graph, z_style: &Var, z_content: &Var) -> Result<Var> {
        let Encoders::Disentangled { bottleneck, .. } = &self.encoders else {
            return Err(Error::Usage("fuse_bottleneck requires the DE variant".into()));
        };
        let zs = g.match_batch(z_style, z_content.shape()[0])?;
        let cat = g.concat_channels(&zs, z_content)?;
        let h = bottleneck.forward(g, &cat)?;
        Ok(g.relu(&h))
    }

    pub fn decode(&self, g: &mut Graph, z: &Var, output_size: (usize, usize)) -> Result<Var> {
        let c = self.spec.embedding_channels();
        if z.shape().len() != 4 || z.shape()[1] != c {
            return Err(Error::Shape(format!("decoder expects [N, {c}, h, w], got {:?}", z.shape())));
        }
        self.decoder.forward(g, z, output_size)
    }

    /// `T(x_s, x_t)`. SE needs an explicit `lambda`; DE ignores it.
    pub fn augment(&self, g: &mut Graph, x_s: &Var, x_t: &Var, lambda: Option<f64>) -> Result<Var> {
        let size = Self::check_input(x_s)?;
        Self::check_input(x_t)?;
        let z = match self.variant {
            Variant::SharedEncoder => {
                let lambda = lambda.ok_or_else(|| {
                    Error::Usage("the SE variant needs a mixup coefficient; draw one with MixupDistribution".into())
                })?;
                let zs = self.encode(g, x_s, EncoderKind::Shared)?;
                let zt = self.encode(g, x_t, EncoderKind::Shared)?;
                mixup_embeddings(g, &zs, &zt, lambda)?
            }
            Variant::DisentangledEncoders => {
                let style = self.encode(g, x_t, EncoderKind::Style)?;
                let content = self.encode(g, x_s, EncoderKind::Content)?;
                self.fuse_bottleneck(g, &style, &content)?
            }
        };
        self.decode(g, &z, size)
    }

    /// `‖T(x, x) − x‖²` averaged over elements and batch (DE only).
    pub fn reconstruction_loss(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        if self.variant != Variant::DisentangledEncoders {
            return Err(Error::Usage("the reconstruction loss is defined for the DE variant".into()));
        }
        let recon = self.augment(g, x, x, None)?;
        let diff = g.sub(&recon, x)?;
        let ss = g.sum_squares(&diff);
        Ok(g.scale(&ss, 1.0 / x.value().len() as f64))
    }

    pub fn encode_images(&self, x: &ImageBatch, which: EncoderKind) -> Result<Embedding> {
        let mut g = Graph::inference();
        let xv = g.constant(x.to_tensor());
        Ok(Embedding(to_array4(self.encode(&mut g, &xv, which)?)))
    }

    pub fn decode_embedding(&self, z: &Embedding, output_size: (usize, usize)) -> Result<ImageBatch> {
        let mut g = Graph::inference();
        let zv = g.constant(z.0.clone().into_dyn());
        ImageBatch::new(to_array4(self.decode(&mut g, &zv, output_size)?), None)
    }

    pub fn fuse_embeddings(&self, z_style: &Embedding, z_content: &Embedding) -> Result<Embedding> {
        let mut g = Graph::inference();
        let s = g.constant(z_style.0.clone().into_dyn());
        let c = g.constant(z_content.0.clone().into_dyn());
        Ok(Embedding(to_array4(self.fuse_bottleneck(&mut g, &s, &c)?)))
    }

    /// Augments a batch without recording gradients. Labels carry over from
    /// the source batch.
    pub fn augment_images(&self, x_s: &ImageBatch, x_t: &ImageBatch, lambda: Option<f64>) -> Result<ImageBatch> {
        let mut g = Graph::inference();
        let xs = g.constant(x_s.to_tensor());
        let xt = g.constant(x_t.to_tensor());
        let out = self.augment(&mut g, &xs, &xt, lambda)?;
        ImageBatch::new(to_array4(out), x_s.labels.clone())
    }

    pub fn reconstruction_loss_value(&self, x: &ImageBatch) -> Result<f64> {
        let mut g = Graph::inference();
        let xv = g.constant(x.to_tensor());
        Ok(self.reconstruction_loss(&mut g, &xv)?.item())
    }
}

impl Module for AugmenterState {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match &self.encoders {
            Encoders::Shared(e) => e.visit(f),
            Encoders::Disentangled {
                style,
                content,
                bottleneck,
            } => {
                style.visit(f);
                content.visit(f);
                bottleneck.visit(f);
            }
        }
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.encoders {
            Encoders::Shared(e) => e.visit_mut(f),
            Encoders::Disentangled {
                style,
                content,
                bottleneck,
            } => {
                style.visit_mut(f);
                content.visit_mut(f);
                bottleneck.visit_mut(f);
            }
        }
        self.decoder.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn batch(n: usize, size: usize, phase: f64) -> ImageBatch {
        let data = Array4::from_shape_fn((n, 3, size, size), |(i, c, y, x)| {
            0.5 + 0.45 * ((i * 7 + c * 3 + y * 5 + x) as f64 * 0.31 + phase).sin()
        });
        ImageBatch::new(data, None).unwrap()
    }

    #[test]
    fn encoder_reduces_by_eight() {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 0);
        let z = aum.encode_images(&batch(2, 32, 0.0), EncoderKind::Shared).unwrap();
        assert_eq!(z.0.shape(), &[2, 16, 4, 4]);
        let z = aum.encode_images(&batch(1, 40, 0.0), EncoderKind::Shared).unwrap();
        assert_eq!(z.0.shape(), &[1, 16, 5, 5]);
    }

    #[test]
    fn full_width_embedding_has_256_channels() {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::full(), 0);
        let z = aum.encode_images(&batch(1, 16, 0.0), EncoderKind::Shared).unwrap();
        assert_eq!(z.0.shape(), &[1, 256, 2, 2]);
    }

    #[test]
    fn encoder_kind_must_match_variant() {
        let se = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 0);
        let de = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 0);
        let x = batch(1, 16, 0.0);
        assert!(matches!(se.encode_images(&x, EncoderKind::Style), Err(Error::Usage(_))));
        assert!(matches!(de.encode_images(&x, EncoderKind::Shared), Err(Error::Usage(_))));
        let z = de.encode_images(&x, EncoderKind::Content).unwrap();
        assert!(matches!(se.fuse_embeddings(&z, &z), Err(Error::Usage(_))));
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 0);
        assert!(matches!(
            aum.encode_images(&batch(1, 20, 0.0), EncoderKind::Shared),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn encode_is_deterministic() {
        let aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 3);
        let x = batch(2, 16, 0.4);
        assert_eq!(
            aum.encode_images(&x, EncoderKind::Style).unwrap(),
            aum.encode_images(&x, EncoderKind::Style).unwrap()
        );
    }

    #[test]
    fn bottleneck_preserves_shape_and_zero() {
        let mut aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 0);
        let z = Embedding(Array4::zeros((2, 16, 4, 4)));
        let out = aum.fuse_embeddings(&z, &z).unwrap();
        assert_eq!(out.0.shape(), &[2, 16, 4, 4]);
        assert!(out.0.iter().all(|&v| v == 0.0));
        // style batch of one broadcasts over content batch
        let style = Embedding(Array4::from_elem((1, 16, 4, 4), 0.3));
        let content = Embedding(Array4::from_elem((3, 16, 4, 4), -0.1));
        assert_eq!(aum.fuse_embeddings(&style, &content).unwrap().0.shape(), &[3, 16, 4, 4]);
        // bias is zero-initialized
        if let Encoders::Disentangled { bottleneck, .. } = &mut aum.encoders {
            assert!(bottleneck.bias.as_ref().unwrap().value.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decode_shape_and_sigmoid_range() {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 1);
        let z = Embedding(Array4::from_shape_fn((2, 16, 4, 4), |(a, b, c, d)| ((a + b * c + d) as f64).sin() * 3.0));
        let out = aum.decode_embedding(&z, (32, 32)).unwrap();
        assert_eq!(out.data.shape(), &[2, 3, 32, 32]);
        assert!(out.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_logits_decode_to_one_half() {
        let mut aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 1);
        aum.decoder.out.weight.value_mut().fill(0.0);
        aum.decoder.out.bias.as_mut().unwrap().value_mut().fill(0.0);
        let z = Embedding(Array4::from_elem((1, 16, 2, 2), 0.7));
        let out = aum.decode_embedding(&z, (16, 16)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn augment_preserves_shape_for_both_variants() {
        let xs = batch(3, 16, 0.0);
        let xt = batch(1, 16, 1.0);
        for variant in [Variant::SharedEncoder, Variant::DisentangledEncoders] {
            let aum = AugmenterState::new(variant, ArchitectureSpec::miniature(), 2);
            let out = aum.augment_images(&xs, &xt, Some(0.8)).unwrap();
            assert_eq!(out.data.shape(), xs.data.shape());
            assert!(out.data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn se_requires_lambda() {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 2);
        let x = batch(1, 16, 0.0);
        assert!(matches!(aum.augment_images(&x, &x, None), Err(Error::Usage(_))));
    }

    #[test]
    fn se_with_lambda_one_ignores_target() {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 2);
        let xs = batch(2, 16, 0.0);
        let a = aum.augment_images(&xs, &batch(1, 16, 1.0), Some(1.0)).unwrap();
        let b = aum.augment_images(&xs, &batch(1, 16, 2.5), Some(1.0)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn reconstruction_loss_is_de_only() {
        let aum = AugmenterState::new(Variant::SharedEncoder, ArchitectureSpec::miniature(), 2);
        assert!(matches!(
            aum.reconstruction_loss_value(&batch(1, 16, 0.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn reconstruction_of_constant_half_against_ones() {
        // Zeroed output conv makes T(x, x) ≡ 0.5, so the loss vs x ≡ 1 is 0.25.
        let mut aum = AugmenterState::new(Variant::DisentangledEncoders, ArchitectureSpec::miniature(), 2);
        aum.decoder.out.weight.value_mut().fill(0.0);
        aum.decoder.out.bias.as_mut().unwrap().value_mut().fill(0.0);
        let ones = ImageBatch::new(Array4::ones((2, 3, 16, 16)), None).unwrap();
        assert_eq!(aum.reconstruction_loss_value(&ones).unwrap(), 0.25);
    }

    #[test]
    fn variant_parses_case_insensitively() {
        assert_eq!("de".parse::<Variant>().unwrap(), Variant::DisentangledEncoders);
        assert_eq!(Variant::SharedEncoder.to_string(), "SE");
        assert!("XX".parse::<Variant>().is_err());
    }
}
