//! Parameters and the handful of layers the networks are built from.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::{BatchStats, Graph, Tensor, Var};
use crate::error::Result;

/// A named tensor owned by a module.
///
/// Non-trainable entries (batch-norm running statistics) are still part of the
/// module state: they are checkpointed and digested, but never bound as
/// gradient leaves.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value: Arc::new(value),
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            trainable: false,
            ..Param::new(name, value)
        }
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// SHA-256 over every parameter and buffer (name, shape, little-endian
    /// bytes), in visit order.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |p| {
            h.update(p.name.as_bytes());
            for d in p.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// Looks up a parameter by full name.
    fn find(&self, name: &str) -> Option<Param> {
        let mut found = None;
        self.visit(&mut |p| {
            if p.name == name {
                found = Some(p.clone());
            }
        });
        found
    }
}

/// Kaiming-style fan-in normal: `std = gain / sqrt(fan_in)`.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense-layer default.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape")
}

pub fn leaky_relu_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv2d {
    /// Kaiming-initialized convolution with zero bias (when present).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
        bias: bool,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [out_c, in_c, k, k];
        Conv2d {
            weight: Param::new(format!("{name}.weight"), kaiming_normal(&shape, in_c * k * k, gain, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_c])))),
            stride,
            pad,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        match self.padding {
            Padding::Reflect if self.pad > 0 => {
                let xp = g.pad_reflect(x, self.pad)?;
                g.conv2d(&xp, &w, b.as_ref(), self.stride, 0)
            }
            _ => g.conv2d(x, &w, b.as_ref(), self.stride, self.pad),
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), uniform_fan_in(&[out_f, in_f], in_f, rng)),
            bias: Param::new(format!("{name}.bias"), uniform_fan_in(&[out_f], in_f, rng)),
        }
    }

    pub fn zeroed(name: &str, in_f: usize, out_f: usize) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(IxDyn(&[out_f, in_f]))),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_f]))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(x, &w, Some(&b))
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.weight"), Tensor::ones(IxDyn(&[c]))),
            beta: Param::new(format!("{name}.bias"), Tensor::zeros(IxDyn(&[c]))),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(IxDyn(&[c]))),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones(IxDyn(&[c]))),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Batch statistics in training mode, running statistics otherwise.
    pub fn forward(&self, g: &mut Graph, x: &Var, train: bool) -> Result<(Var, Option<BatchStats>)> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        if train {
            let (y, stats) = g.batch_norm_train(x, &gamma, &beta, self.eps)?;
            return Ok((y, Some(stats)));
        }
        // Eval mode folds into a per-channel affine map; gamma/beta only
        // receive gradients through the training path.
        let (scale, shift): (Vec<f64>, Vec<f64>) = self
            .gamma
            .value
            .iter()
            .zip(self.beta.value.iter())
            .zip(self.running_mean.value.iter().zip(self.running_var.value.iter()))
            .map(|((gm, bt), (m, v))| {
                let s = gm / (v + self.eps).sqrt();
                (s, bt - m * s)
            })
            .unzip();
        Ok((g.channel_affine(x, &scale, &shift)?, None))
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.value_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.value_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn digest_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 2, 3, 3, 1, 1, Padding::Zero, true, 1.0, &mut rng);
        let before = conv.digest();
        assert_eq!(before, conv.clone().digest());
        conv.weight.value_mut()[[0, 0, 0, 0]] += 1e-12;
        assert_ne!(before, conv.digest());
    }

    #[test]
    fn kaiming_std_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = kaiming_normal(&[64, 32, 3, 3], 288, 1.0, &mut rng);
        let var = t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var * 288.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let bn = BatchNorm2d::new("bn", 2);
        let mut g = Graph::inference();
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 2, 1, 2]), vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 0.0, 20.0]).unwrap(),
        );
        let (y, stats) = bn.forward(&mut g, &x, true).unwrap();
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 4.0).abs() < 1e-12);
        let ch0: Vec<f64> = [0, 1, 4, 5].iter().map(|&i| y.value().as_slice().unwrap()[i]).collect();
        let mean: f64 = ch0.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
