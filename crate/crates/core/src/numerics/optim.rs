use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Adagrad { eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adagrad() -> Self {
        OptimizerKind::Adagrad { eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    first: Tensor,
    second: Option<Tensor>,
    steps: u64,
}

/// Optimizer with per-parameter accumulators created on first use.
///
/// Parameters without a gradient in a given step are left untouched, including
/// their accumulators.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    slots: HashMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            steps: 0,
            slots: HashMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    format!("optimizer step for {}", store.name(id)),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), store.get(id).shape()),
                ));
            }
        }
        self.steps += 1;
        for (id, g) in grads.iter() {
            let param = store.get_mut(id);
            let slot = self.slots.entry(id).or_insert_with(|| Slot {
                first: Tensor::zeros(g.shape()),
                second: matches!(self.kind, OptimizerKind::Adam { .. }).then(|| Tensor::zeros(g.shape())),
                steps: 0,
            });
            slot.steps += 1;
            let lr = self.lr;
            let p = param.data_mut();
            let gd = g.data();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let vel = slot.first.data_mut();
                    for i in 0..p.len() {
                        vel[i] = momentum * vel[i] + gd[i];
                        p[i] -= lr * vel[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = slot.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = slot.first.data_mut();
                    let v = slot.second.as_mut().expect("adam has second moment").data_mut();
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::Adagrad { eps } => {
                    let acc = slot.first.data_mut();
                    for i in 0..p.len() {
                        acc[i] += gd[i] * gd[i];
                        p[i] -= lr * gd[i] / (acc[i].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
