use crate::error::{Error, Result};

use super::params::{Group, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
    SgdMomentum { momentum: f32 },
    /// Bias-corrected Adam with weight decay folded into the gradient.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Clone, Debug)]
enum Slot {
    Momentum(Vec<f32>),
    Moments { m: Vec<f32>, v: Vec<f32> },
}

/// Optimizer hyperparameters plus per-parameter state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    slots: Vec<Option<Slot>>,
    steps: u64,
}

impl OptimizerState {
    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, lr, weight_decay)
    }

    pub fn adam(lr: f32, weight_decay: f32) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
        )
    }

    pub fn new(kind: OptimizerKind, lr: f32, weight_decay: f32) -> Self {
        OptimizerState {
            kind,
            lr,
            weight_decay,
            slots: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter in `groups` using the gradients
    /// currently held by the store.
    pub fn step_groups(&mut self, store: &mut ParamStore, groups: &[Group]) -> Result<()> {
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| groups.contains(&store.get(id).group))
            .collect();
        self.step(store, &ids)
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for &id in ids {
            if self.slots.len() <= id.index() {
                self.slots.resize(id.index() + 1, None);
            }
            let param = store.get_mut(id);
            if param.grad.shape() != param.value.shape() {
                return Err(Error::shape("optimizer_step", format!("gradient for {}", param.name)));
            }
            let n = param.value.len();
            let slot = self.slots[id.index()].get_or_insert_with(|| match self.kind {
                OptimizerKind::SgdMomentum { .. } => Slot::Momentum(vec![0.0; n]),
                OptimizerKind::Adam { .. } => Slot::Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            });
            let (lr, wd) = (self.lr, self.weight_decay);
            let grad = param.grad.data();
            let value = param.value.data_mut();
            match (self.kind, slot) {
                (OptimizerKind::SgdMomentum { momentum }, Slot::Momentum(buf)) => {
                    for i in 0..n {
                        buf[i] = momentum * buf[i] + grad[i] + wd * value[i];
                        value[i] -= lr * buf[i];
                    }
                }
                (OptimizerKind::Adam { beta1, beta2, eps }, Slot::Moments { m, v }) => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..n {
                        let g = grad[i] + wd * value[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        value[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                _ => unreachable!("slot kind follows optimizer kind"),
            }
        }
        Ok(())
    }
}
