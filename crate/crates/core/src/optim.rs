use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

/// First-order optimizer keyed by parameter id. Parameters that received no
/// gradient in a step are left untouched, state included.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: HashMap<u64, u64>,
    first: HashMap<u64, Vec<f64>>,
    second: HashMap<u64, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            steps: HashMap::new(),
            first: HashMap::new(),
            second: HashMap::new(),
        })
    }

    /// Apply the gradients accumulated on `tape` to the module's parameters.
    pub fn step(&mut self, module: &mut dyn Module, tape: &Tape) {
        let lr = self.lr;
        let kind = self.kind;
        module.visit_mut("", &mut |_, p| {
            if !p.kind.trainable() {
                return;
            }
            let Some(g) = tape.param_grad(p.id()) else { return };
            let g = g.data();
            let n = g.len();
            let id = p.id();
            let t = self.steps.entry(id).or_insert(0);
            *t += 1;
            let m = self.first.entry(id).or_insert_with(|| vec![0.0; n]);
            let w = p.value.data_mut();
            match kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second.entry(id).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - beta1.powi(*t as i32);
                    let c2 = 1.0 - beta2.powi(*t as i32);
                    for i in 0..n {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..n {
                        m[i] = momentum * m[i] + g[i];
                        w[i] -= lr * m[i];
                    }
                }
            }
        });
    }
}
