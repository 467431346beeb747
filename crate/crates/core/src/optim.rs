//! Optimizers keyed by parameter name so their state serializes alongside
//! the module it belongs to.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Tensor};
use crate::nn::Module;

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients) {
        module.visit_mut(&mut |p| {
            let Some(g) = grads.get(&p.name).filter(|_| p.trainable) else {
                return;
            };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.momentum * *v + g);
            let lr = self.lr;
            p.value_mut().zip_mut_with(v, |w, &v| *w -= lr * v);
        });
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        module.visit_mut(&mut |p| {
            let Some(g) = grads.get(&p.name).filter(|_| p.trainable) else {
                return;
            };
            let m = self.m.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let w = p.value_mut();
            w.mapv_inplace(|w| w * (1.0 - lr * wd));
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::{Linear, Param};

    struct One(Param);

    impl Module for One {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    fn grad_of_square(m: &One) -> Gradients {
        let mut g = Graph::new();
        let p = g.param(&m.0);
        let l = g.sum_squares(&p);
        g.backward(&l).unwrap()
    }

    #[test]
    fn sgd_momentum_matches_hand_update() {
        let mut m = One(Param::new("p", ndarray::arr1(&[1.0]).into_dyn()));
        let mut opt = Sgd::new(0.1, 0.9);
        let gr = grad_of_square(&m);
        opt.step(&mut m, &gr); // g=2, v=2, p=0.8
        assert!((m.0.value[[0]] - 0.8).abs() < 1e-15);
        let gr = grad_of_square(&m);
        opt.step(&mut m, &gr); // g=1.6, v=3.4, p=0.46
        assert!((m.0.value[[0]] - 0.46).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut m = One(Param::new("p", ndarray::arr1(&[1.0]).into_dyn()));
        let mut opt = AdamW::new(1e-3, 0.0);
        let gr = grad_of_square(&m);
        opt.step(&mut m, &gr);
        assert!((m.0.value[[0]] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut lin = Linear::new("l", 2, 2, &mut rng);
        lin.weight.trainable = false;
        let before = lin.weight.value.clone();
        let mut g = Graph::new();
        let x = g.constant(ndarray::arr2(&[[1.0, 2.0]]).into_dyn());
        let y = lin.forward(&mut g, &x).unwrap();
        let l = g.sum_squares(&y);
        let grads = g.backward(&l).unwrap();
        Sgd::new(0.1, 0.0).step(&mut lin, &grads);
        assert_eq!(before, lin.weight.value);
    }
}
