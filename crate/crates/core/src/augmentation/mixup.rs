use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::Embedding;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Beta distribution the SE mixing coefficient is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupDistribution {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MixupDistribution {
    fn default() -> Self {
        MixupDistribution { alpha: 5.0, beta: 1.0 }
    }
}

impl MixupDistribution {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Config(format!("mixup Beta parameters must be positive, got ({alpha}, {beta})")));
        }
        Ok(MixupDistribution { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        Beta::new(self.alpha, self.beta)
            .expect("validated parameters")
            .sample(rng)
    }
}

/// `λ·z_s + (1−λ)·z_t`; a target batch of one is broadcast over the source
/// batch. `λ = 1` and `λ = 0` return the respective input unchanged.
pub fn mixup_embeddings(g: &mut Graph, z_s: &Var, z_t: &Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("mixup coefficient {lambda} outside [0, 1]")));
    }
    let n = z_s.shape().first().copied().unwrap_or(0);
    let zt = g.match_batch(z_t, n)?;
    if zt.shape() != z_s.shape() {
        return Err(Error::Shape(format!(
            "cannot mix embeddings of shape {:?} and {:?}",
            z_s.shape(),
            z_t.shape()
        )));
    }
    if lambda == 1.0 {
        return Ok(z_s.clone());
    }
    if lambda == 0.0 {
        return Ok(zt);
    }
    g.lincomb(z_s, lambda, &zt, 1.0 - lambda)
}

impl Embedding {
    /// Array-level [`mixup_embeddings`].
    pub fn mixup(z_s: &Embedding, z_t: &Embedding, lambda: f64) -> Result<Embedding> {
        let mut g = Graph::inference();
        let a = g.constant(z_s.0.clone().into_dyn());
        let b = g.constant(z_t.0.clone().into_dyn());
        let out = mixup_embeddings(&mut g, &a, &b, lambda)?;
        Ok(Embedding(out.into_tensor().into_dimensionality().expect("rank 4")))
    }
}
