//! SGD with momentum and Adam, with coupled L2 weight decay that is never
//! applied to task diagonals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Grads, MtlModel, ParamKey};
use crate::tensor::Tensor;

pub const MOMENTUM: f64 = 0.9;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(Self::SgdMomentum),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Argument(format!(
                "unknown optimizer `{other}` (expected sgd-momentum or adam)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SgdMomentum => "sgd-momentum",
            Self::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    /// Momentum buffer (SGD) or first moment (Adam).
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

/// Per-parameter optimizer state keyed by [`ParamKey`]. Parameters without a
/// gradient in a step are left alone, state included.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    slots: BTreeMap<ParamKey, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr` to every parameter that
    /// has an entry in `grads`. `lr == 0` is a no-op.
    pub fn step(&mut self, model: &mut MtlModel, grads: &Grads, lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        for (key, param) in model.params_mut() {
            let Some(grad) = grads.get(&key) else { continue };
            if grad.shape() != param.shape() {
                return Err(Error::dim("optimizer step", param.shape(), grad.shape()));
            }
            let wd = if key.role.is_diag() { 0.0 } else { self.weight_decay };
            let p = param.to_f64_vec();
            let g: Vec<f64> = grad.to_f64_vec().iter().zip(&p).map(|(g, p)| g + wd * p).collect();
            let slot = self.slots.entry(key).or_default();
            slot.steps += 1;
            let updated: Vec<f64> = match self.kind {
                OptimizerKind::SgdMomentum => {
                    if slot.m.is_empty() {
                        slot.m = g;
                    } else {
                        for (m, g) in slot.m.iter_mut().zip(&g) {
                            *m = MOMENTUM * *m + g;
                        }
                    }
                    p.iter().zip(&slot.m).map(|(p, m)| p - lr * m).collect()
                }
                OptimizerKind::Adam => {
                    if slot.m.is_empty() {
                        slot.m = vec![0.0; g.len()];
                        slot.v = vec![0.0; g.len()];
                    }
                    let c1 = 1.0 - BETA1.powi(slot.steps);
                    let c2 = 1.0 - BETA2.powi(slot.steps);
                    let mut out = p;
                    for i in 0..g.len() {
                        slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g[i];
                        slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g[i] * g[i];
                        out[i] -= lr * (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + ADAM_EPS);
                    }
                    out
                }
            };
            // Rejects non-finite results; the trainer reports those as divergence.
            *param = Tensor::from_fn(param.shape(), param.dtype(), |i| updated[i])?;
        }
        Ok(())
    }
}
