//! First-order optimizers with L2 weight decay folded into the gradient.

use crate::numgrad::Tensor;

use super::config::{OptimizerKind, TrainConfig};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            t: 0,
            m: zeros(),
            v: if cfg.optimizer == OptimizerKind::Adam { zeros() } else { Vec::new() },
        }
    }

    /// Updates every parameter whose `frozen` flag is false.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], frozen: &[bool]) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            let wd = self.weight_decay;
            let pd = p.data_mut();
            let gd = g.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    let m = self.m[i].data_mut();
                    for j in 0..pd.len() {
                        let gj = gd[j] + wd * pd[j];
                        m[j] = self.momentum * m[j] + gj;
                        pd[j] -= self.lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for j in 0..pd.len() {
                        let gj = gd[j] + wd * pd[j];
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                        pd[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
