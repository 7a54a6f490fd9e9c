//! First-order optimisers over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Scalar;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Rmsprop,
    Adadelta,
    Nadam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] =
        [OptimizerKind::Adam, OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adadelta, OptimizerKind::Nadam];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Nadam => "nadam",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "Adam",
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Rmsprop => "RMSprop",
            OptimizerKind::Adadelta => "Adadelta",
            OptimizerKind::Nadam => "Nadam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let l = s.to_ascii_lowercase();
        OptimizerKind::ALL.into_iter().find(|k| k.name() == l).ok_or_else(|| Error::Config(format!("unknown optimizer {s:?}")))
    }
}

/// Hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub rho: f64,
    pub alpha: f64,
    pub momentum_decay: f64,
}

impl OptimizerHparams {
    pub fn defaults(kind: OptimizerKind) -> Self {
        let base = OptimizerHparams { beta1: 0.0, beta2: 0.0, eps: 0.0, momentum: 0.0, rho: 0.0, alpha: 0.0, momentum_decay: 0.0 };
        match kind {
            OptimizerKind::Adam => OptimizerHparams { beta1: 0.9, beta2: 0.999, eps: 1e-8, ..base },
            OptimizerKind::Sgd => OptimizerHparams { momentum: 0.9, ..base },
            OptimizerKind::Rmsprop => OptimizerHparams { alpha: 0.99, eps: 1e-8, ..base },
            OptimizerKind::Adadelta => OptimizerHparams { rho: 0.9, eps: 1e-6, ..base },
            OptimizerKind::Nadam => OptimizerHparams { beta1: 0.9, beta2: 0.999, eps: 1e-8, momentum_decay: 4e-3, ..base },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub hp: OptimizerHparams,
    pub lr: f64,
    step: u64,
    s1: Vec<Vec<T>>,
    s2: Vec<Vec<T>>,
    mu_product: f64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, hp: OptimizerHparams::defaults(kind), lr, step: 0, s1: Vec::new(), s2: Vec::new(), mu_product: 1.0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable weight that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let n = store.len();
        if self.s1.len() < n {
            self.s1.resize_with(n, Vec::new);
            self.s2.resize_with(n, Vec::new);
        }
        let t = self.step as i32;
        let hp = self.hp;
        let lr = T::c(self.lr);
        let (s1, s2) = (&mut self.s1, &mut self.s2);
        let (b1, b2, eps) = (T::c(hp.beta1), T::c(hp.beta2), T::c(hp.eps));
        let one = T::one();
        match self.kind {
            OptimizerKind::Sgd => {
                let mom = T::c(hp.momentum);
                store.for_each_trainable(|i, w, g| {
                    let buf = &mut s1[i];
                    if buf.is_empty() {
                        *buf = g.to_vec();
                    } else {
                        for (b, &gi) in buf.iter_mut().zip(g) {
                            *b = mom * *b + gi;
                        }
                    }
                    for (wi, &b) in w.iter_mut().zip(buf.iter()) {
                        *wi -= lr * b;
                    }
                });
            }
            OptimizerKind::Adam => {
                let bc1 = T::c(1.0 - hp.beta1.powi(t));
                let bc2_sqrt = T::c((1.0 - hp.beta2.powi(t)).sqrt());
                let step_size = lr / bc1;
                store.for_each_trainable(|i, w, g| {
                    let (m, v) = (&mut s1[i], &mut s2[i]);
                    if m.is_empty() {
                        *m = vec![T::zero(); g.len()];
                        *v = vec![T::zero(); g.len()];
                    }
                    for k in 0..g.len() {
                        m[k] = b1 * m[k] + (one - b1) * g[k];
                        v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                        let denom = v[k].sqrt() / bc2_sqrt + eps;
                        w[k] -= step_size * m[k] / denom;
                    }
                });
            }
            OptimizerKind::Rmsprop => {
                let a = T::c(hp.alpha);
                store.for_each_trainable(|i, w, g| {
                    let v = &mut s2[i];
                    if v.is_empty() {
                        *v = vec![T::zero(); g.len()];
                    }
                    for k in 0..g.len() {
                        v[k] = a * v[k] + (one - a) * g[k] * g[k];
                        w[k] -= lr * g[k] / (v[k].sqrt() + eps);
                    }
                });
            }
            OptimizerKind::Adadelta => {
                let rho = T::c(hp.rho);
                store.for_each_trainable(|i, w, g| {
                    let (sq, acc) = (&mut s1[i], &mut s2[i]);
                    if sq.is_empty() {
                        *sq = vec![T::zero(); g.len()];
                        *acc = vec![T::zero(); g.len()];
                    }
                    for k in 0..g.len() {
                        sq[k] = rho * sq[k] + (one - rho) * g[k] * g[k];
                        let delta = (acc[k] + eps).sqrt() / (sq[k] + eps).sqrt() * g[k];
                        acc[k] = rho * acc[k] + (one - rho) * delta * delta;
                        w[k] -= lr * delta;
                    }
                });
            }
            OptimizerKind::Nadam => {
                let mu = hp.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * hp.momentum_decay));
                let mu_next = hp.beta1 * (1.0 - 0.5 * 0.96f64.powf((t + 1) as f64 * hp.momentum_decay));
                self.mu_product *= mu;
                let c_grad = T::c(self.lr * (1.0 - mu) / (1.0 - self.mu_product));
                let c_mom = T::c(self.lr * mu_next / (1.0 - self.mu_product * mu_next));
                let bc2 = T::c(1.0 - hp.beta2.powi(t));
                store.for_each_trainable(|i, w, g| {
                    let (m, v) = (&mut s1[i], &mut s2[i]);
                    if m.is_empty() {
                        *m = vec![T::zero(); g.len()];
                        *v = vec![T::zero(); g.len()];
                    }
                    for k in 0..g.len() {
                        m[k] = b1 * m[k] + (one - b1) * g[k];
                        v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                        let denom = (v[k] / bc2).sqrt() + eps;
                        w[k] -= c_grad * g[k] / denom + c_mom * m[k] / denom;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Ctx, Init};
    use crate::tensor::{Shape, Tensor};

    /// Minimises `sum((w - 3)^2)` over a single 4-vector.
    fn run(kind: OptimizerKind, lr: f64, steps: usize) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let id = Init::new(&mut store, 0).constant("w", Shape::new(1, 4, 1, 1), 0.0);
        let mut opt = Optimizer::new(kind, lr);
        for _ in 0..steps {
            store.zero_grads();
            let mut cx = Ctx::new(&mut store, true);
            let w = cx.param(id);
            let target = cx.graph.constant(Tensor::full(Shape::new(1, 4, 1, 1), 3.0));
            let l = cx.graph.mse(w, target);
            cx.backward(l);
            opt.step(&mut store);
        }
        store.value(id).data()[0]
    }

    #[test]
    fn optimisers_descend() {
        for (kind, lr) in [
            (OptimizerKind::Adam, 0.1),
            (OptimizerKind::Sgd, 0.05),
            (OptimizerKind::Rmsprop, 0.05),
            (OptimizerKind::Adadelta, 1.0),
            (OptimizerKind::Nadam, 0.1),
        ] {
            let w = run(kind, lr, 300);
            let tol = if kind == OptimizerKind::Adadelta { 2.0 } else { 0.1 };
            assert!((w - 3.0).abs() < tol, "{kind}: {w}");
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let w = run(OptimizerKind::Adam, 1e-3, 1);
        assert!((w - 1e-3).abs() < 1e-9);
        let w = run(OptimizerKind::Sgd, 0.1, 1);
        assert!((w - 0.1 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn parse_names() {
        assert_eq!("Nadam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Nadam);
        assert!("lion".parse::<OptimizerKind>().is_err());
    }
}
