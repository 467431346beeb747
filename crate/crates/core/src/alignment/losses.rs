//! Perceptual losses on feature maps.
//!
//! All scalars are batch means of the per-sample quantities. A right-hand
//! argument with a batch of one (the single target image) is broadcast.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::FeatureExtractor;
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Activations `[batch, C, H, W]` of one named layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array4<f64>,
    pub layer_name: String,
}

/// Per-sample normalized Gram matrices `[batch, C, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(pub Array3<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerceptualMode {
    /// Gram-matrix style loss plus raw content loss.
    #[serde(rename = "GRAM")]
    Gram,
    /// Average-pooled feature distances for both style and content layers.
    #[serde(rename = "AVP")]
    AvgPool,
}

impl fmt::Display for PerceptualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerceptualMode::Gram => "GRAM",
            PerceptualMode::AvgPool => "AVP",
        })
    }
}

impl FromStr for PerceptualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GRAM" => Ok(PerceptualMode::Gram),
            "AVP" => Ok(PerceptualMode::AvgPool),
            _ => Err(Error::Config(format!("unknown perceptual mode `{s}` (expected GRAM or AVP)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// Layers compared against the target image.
    pub style_layers: Vec<String>,
    /// Layers compared against the source image.
    pub content_layers: Vec<String>,
    pub layer_weights: BTreeMap<String, f64>,
    pub mode: PerceptualMode,
    pub pool_kernel: usize,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            style_layers: vec!["relu1_2".into(), "relu2_2".into()],
            content_layers: vec!["relu4_3".into()],
            layer_weights: [("relu1_2", 0.25), ("relu2_2", 1.0), ("relu4_3", 1.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            mode: PerceptualMode::Gram,
            pool_kernel: 2,
        }
    }
}

impl PerceptualConfig {
    pub fn weight(&self, layer: &str) -> f64 {
        self.layer_weights.get(layer).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((k, w)) = self.layer_weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("layer weight for {k} must be non-negative, got {w}")));
        }
        if self.pool_kernel == 0 {
            return Err(Error::Config("pool_kernel must be positive".into()));
        }
        Ok(())
    }

    /// True when every weighted term is zero, so no feature pass is needed.
    pub fn is_inactive(&self) -> bool {
        self.style_layers
            .iter()
            .chain(&self.content_layers)
            .all(|l| self.weight(l) == 0.0)
    }
}

fn scalar(g: &Graph, v: f64) -> Var {
    g.constant(Tensor::from_elem(ndarray::IxDyn(&[]), v))
}

/// `G = F Fᵀ / (C H W)` per sample.
pub fn gram_matrix(g: &mut Graph, f: &Var) -> Result<Var> {
    g.gram(f)
}

/// `‖G(F_aug) − G(F_tgt)‖²_F`, batch-averaged. Spatial sizes may differ.
pub fn style_layer_loss(g: &mut Graph, f_aug: &Var, f_tgt: &Var) -> Result<Var> {
    let (ca, ct) = (f_aug.shape().get(1), f_tgt.shape().get(1));
    if ca != ct {
        return Err(Error::Shape(format!(
            "style loss: {:?} vs {:?} channel mismatch",
            f_aug.shape(),
            f_tgt.shape()
        )));
    }
    let n = f_aug.shape()[0];
    let ga = g.gram(f_aug)?;
    let gt = g.gram(f_tgt)?;
    let gt = g.match_batch(&gt, n)?;
    let d = g.sub(&ga, &gt)?;
    let ss = g.sum_squares(&d);
    Ok(g.scale(&ss, 1.0 / n as f64))
}

/// `‖F_aug − F_src‖² / (C H W)`, batch-averaged.
pub fn content_layer_loss(g: &mut Graph, f_aug: &Var, f_src: &Var) -> Result<Var> {
    if f_aug.shape() != f_src.shape() {
        return Err(Error::Shape(format!(
            "content loss: {:?} vs {:?}",
            f_aug.shape(),
            f_src.shape()
        )));
    }
    let d = g.sub(f_aug, f_src)?;
    let ss = g.sum_squares(&d);
    Ok(g.scale(&ss, 1.0 / f_aug.value().len() as f64))
}

/// Non-overlapping `k × k` average pooling of both maps, then the
/// mean-normalized squared distance over the reduced maps, batch-averaged.
pub fn avgpool_layer_loss(g: &mut Graph, f_a: &Var, f_b: &Var, pool_kernel: usize) -> Result<Var> {
    let n = f_a.shape().first().copied().unwrap_or(0);
    let f_b = g.match_batch(f_b, n)?;
    if f_a.shape() != f_b.shape() {
        return Err(Error::Shape(format!(
            "average-pooled loss: {:?} vs {:?}",
            f_a.shape(),
            f_b.shape()
        )));
    }
    let pa = g.avgpool2d(f_a, pool_kernel)?;
    let pb = g.avgpool2d(&f_b, pool_kernel)?;
    let d = g.sub(&pa, &pb)?;
    let ss = g.sum_squares(&d);
    Ok(g.scale(&ss, 1.0 / pa.value().len() as f64))
}

/// A perceptual loss and its weighted per-layer terms.
#[derive(Debug, Clone)]
pub struct PerceptualLoss {
    pub total: Var,
    pub style_terms: Vec<(String, f64)>,
    pub content_terms: Vec<(String, f64)>,
}

fn weighted_sum(
    g: &mut Graph,
    fe: &FeatureExtractor,
    cfg: &PerceptualConfig,
    x_aug: &Var,
    x_s: &Var,
    x_t: &Var,
    style_term: &dyn Fn(&mut Graph, &Var, &Var) -> Result<Var>,
    content_term: &dyn Fn(&mut Graph, &Var, &Var) -> Result<Var>,
) -> Result<PerceptualLoss> {
    cfg.validate()?;
    let active = |ls: &[String]| -> Vec<String> { ls.iter().filter(|l| cfg.weight(l) != 0.0).cloned().collect() };
    let style = active(&cfg.style_layers);
    let content = active(&cfg.content_layers);
    let mut total = scalar(g, 0.0);
    let mut style_terms = Vec::new();
    let mut content_terms = Vec::new();
    if style.is_empty() && content.is_empty() {
        return Ok(PerceptualLoss {
            total,
            style_terms,
            content_terms,
        });
    }

    let mut aug_layers: Vec<&str> = Vec::new();
    for l in style.iter().chain(&content) {
        if !aug_layers.contains(&l.as_str()) {
            aug_layers.push(l);
        }
    }
    let aug_maps = fe.extract_features(g, x_aug, &aug_layers)?;
    let aug_at = |l: &str| aug_maps[aug_layers.iter().position(|a| *a == l).unwrap()].clone();

    if !style.is_empty() {
        let names: Vec<&str> = style.iter().map(String::as_str).collect();
        let tgt_maps = fe.extract_features(g, x_t, &names)?;
        for (l, ft) in style.iter().zip(&tgt_maps) {
            let term = style_term(g, &aug_at(l), ft)?;
            let w = cfg.weight(l);
            style_terms.push((l.clone(), w * term.item()));
            total = g.lincomb(&total, 1.0, &term, w)?;
        }
    }
    if !content.is_empty() {
        let names: Vec<&str> = content.iter().map(String::as_str).collect();
        let src_maps = fe.extract_features(g, x_s, &names)?;
        for (l, fs) in content.iter().zip(&src_maps) {
            let term = content_term(g, &aug_at(l), fs)?;
            let w = cfg.weight(l);
            content_terms.push((l.clone(), w * term.item()));
            total = g.lincomb(&total, 1.0, &term, w)?;
        }
    }
    Ok(PerceptualLoss {
        total,
        style_terms,
        content_terms,
    })
}

/// Weighted Gram style terms (augmented vs target) plus weighted content
/// terms (augmented vs source).
pub fn perceptual_loss_gram(
    g: &mut Graph,
    fe: &FeatureExtractor,
    cfg: &PerceptualConfig,
    x_aug: &Var,
    x_s: &Var,
    x_t: &Var,
) -> Result<PerceptualLoss> {
    if cfg.mode != PerceptualMode::Gram {
        return Err(Error::Validation("perceptual_loss_gram needs mode GRAM".into()));
    }
    weighted_sum(g, fe, cfg, x_aug, x_s, x_t, &style_layer_loss, &content_layer_loss)
}

/// Same pairing as [`perceptual_loss_gram`] with the average-pooled distance
/// for both kinds of layer.
pub fn perceptual_loss_avp(
    g: &mut Graph,
    fe: &FeatureExtractor,
    cfg: &PerceptualConfig,
    x_aug: &Var,
    x_s: &Var,
    x_t: &Var,
) -> Result<PerceptualLoss> {
    if cfg.mode != PerceptualMode::AvgPool {
        return Err(Error::Validation("perceptual_loss_avp needs mode AVP".into()));
    }
    let k = cfg.pool_kernel;
    let term = move |g: &mut Graph, a: &Var, b: &Var| avgpool_layer_loss(g, a, b, k);
    weighted_sum(g, fe, cfg, x_aug, x_s, x_t, &term, &term)
}

pub fn perceptual_loss(
    g: &mut Graph,
    fe: &FeatureExtractor,
    cfg: &PerceptualConfig,
    x_aug: &Var,
    x_s: &Var,
    x_t: &Var,
) -> Result<PerceptualLoss> {
    match cfg.mode {
        PerceptualMode::Gram => perceptual_loss_gram(g, fe, cfg, x_aug, x_s, x_t),
        PerceptualMode::AvgPool => perceptual_loss_avp(g, fe, cfg, x_aug, x_s, x_t),
    }
}

fn to_var(g: &Graph, f: &FeatureMap) -> Var {
    g.constant(f.data.clone().into_dyn())
}

impl FeatureMap {
    pub fn gram(&self) -> Result<GramMatrix> {
        let mut g = Graph::inference();
        let v = to_var(&g, self);
        let gm = gram_matrix(&mut g, &v)?;
        Ok(GramMatrix(gm.into_tensor().into_dimensionality().expect("rank 3")))
    }

    pub fn style_loss(&self, target: &FeatureMap) -> Result<f64> {
        let mut g = Graph::inference();
        let (a, b) = (to_var(&g, self), to_var(&g, target));
        Ok(style_layer_loss(&mut g, &a, &b)?.item())
    }

    pub fn content_loss(&self, source: &FeatureMap) -> Result<f64> {
        let mut g = Graph::inference();
        let (a, b) = (to_var(&g, self), to_var(&g, source));
        Ok(content_layer_loss(&mut g, &a, &b)?.item())
    }

    pub fn avgpool_loss(&self, other: &FeatureMap, pool_kernel: usize) -> Result<f64> {
        let mut g = Graph::inference();
        let (a, b) = (to_var(&g, self), to_var(&g, other));
        Ok(avgpool_layer_loss(&mut g, &a, &b, pool_kernel)?.item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(shape: (usize, usize, usize, usize), f: impl Fn(usize) -> f64) -> FeatureMap {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        FeatureMap::new(Array4::from_shape_vec(shape, (0..n).map(f).collect()).unwrap(), "t")
    }

    #[test]
    fn zero_map_gives_zero_gram() {
        let g = fmap((1, 2, 3, 3), |_| 0.0).gram().unwrap();
        assert_eq!(g.0.shape(), &[1, 2, 2]);
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_map_gram_is_a_squared_over_c() {
        let g = fmap((1, 4, 2, 2), |_| 2.0).gram().unwrap();
        assert!(g.0.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_vs_constant_style_loss_is_one() {
        for c in [1, 3, 8] {
            let a = fmap((2, c, 3, 2), |_| 0.0);
            let t = fmap((1, c, 5, 5), |_| 1.0);
            assert!((a.style_loss(&t).unwrap() - 1.0).abs() < 1e-12, "C={c}");
        }
    }

    #[test]
    fn style_loss_needs_matching_channels() {
        let a = fmap((1, 2, 2, 2), |_| 0.0);
        let b = fmap((1, 3, 2, 2), |_| 0.0);
        assert!(matches!(a.style_loss(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn content_loss_of_unit_offset_is_one() {
        let a = fmap((2, 3, 4, 5), |i| (i as f64).sin());
        let b = fmap((2, 3, 4, 5), |i| (i as f64).sin() + 1.0);
        assert!((a.content_loss(&b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(a.content_loss(&a).unwrap(), 0.0);
        let c = fmap((2, 3, 4, 4), |_| 0.0);
        assert!(matches!(a.content_loss(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn global_avgpool_constant_case() {
        let a = fmap((1, 5, 4, 4), |_| 1.0);
        let b = fmap((1, 5, 4, 4), |_| 3.0);
        assert_eq!(a.avgpool_loss(&b, 4).unwrap(), 4.0);
        assert_eq!(a.avgpool_loss(&a, 2).unwrap(), 0.0);
        assert!(matches!(a.avgpool_loss(&b, 5), Err(Error::Validation(_))));
    }

    #[test]
    fn inactive_config_skips_extraction() {
        let mut cfg = PerceptualConfig::default();
        assert!(!cfg.is_inactive());
        for w in cfg.layer_weights.values_mut() {
            *w = 0.0;
        }
        assert!(cfg.is_inactive());
    }

    #[test]
    fn negative_weight_is_a_config_error() {
        let mut cfg = PerceptualConfig::default();
        cfg.layer_weights.insert("relu1_2".into(), -1.0);
        assert!(cfg.validate().is_err());
    }
}
