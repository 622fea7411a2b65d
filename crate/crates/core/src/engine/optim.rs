//! Parameter updates: classical momentum SGD and Adam, both with weight decay
//! added to the gradient as an L2 term.

use super::config::{OptimizerKind, OptimizerSection};
use crate::model::{Gradients, ModelBundle};

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerSection,
    /// Momentum buffer (SGD) or first moment (Adam), one per tensor.
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: &OptimizerSection, model: &ModelBundle) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        let second = if config.kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Self { config: config.clone(), first: zeros, second, steps: 0 }
    }

    /// Learning rate of the named tensor before any schedule factor.
    pub fn base_lr(&self, name: &str) -> f64 {
        match self.config.head_lr {
            Some(lr) if name.starts_with("object_head") => lr,
            _ => self.config.lr,
        }
    }

    /// One update with every rate multiplied by `lr_factor`.
    pub fn step(&mut self, model: &mut ModelBundle, grads: &Gradients, lr_factor: f64) {
        self.steps += 1;
        let c = &self.config;
        let (b1, b2) = (c.adam_beta1, c.adam_beta2);
        let bias1 = 1.0 - b1.powi(self.steps as i32);
        let bias2 = 1.0 - b2.powi(self.steps as i32);
        let lrs: Vec<f64> = model.params().iter().map(|(n, _)| self.base_lr(n) * lr_factor).collect();
        for (t, ((_, p), (_, g))) in model.params_mut().into_iter().zip(grads.params()).enumerate() {
            let lr = lrs[t];
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gw), v) in p.iter_mut().zip(g).zip(self.first[t].iter_mut()) {
                        let d = gw + c.weight_decay * *w;
                        *v = c.momentum * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    for (((w, &gw), m), s) in p.iter_mut().zip(g).zip(self.first[t].iter_mut()).zip(self.second[t].iter_mut()) {
                        let d = gw + c.weight_decay * *w;
                        *m = b1 * *m + (1.0 - b1) * d;
                        *s = b2 * *s + (1.0 - b2) * d * d;
                        *w -= lr * (*m / bias1) / ((*s / bias2).sqrt() + c.adam_eps);
                    }
                }
            }
        }
    }
}
