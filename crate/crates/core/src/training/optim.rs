//! Adam and momentum SGD over a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::schedule::OptimizerKind;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

/// Optimizer state: first/second moments (Adam) or velocity (SGD, kept in
/// `m`) per parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    slots: HashMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Self {
            kind,
            momentum,
            slots: HashMap::new(),
        }
    }

    /// Updates every parameter with `trainable(name)`; others are left
    /// untouched. A trainable parameter missing from `grads` gets a zero
    /// gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<String, Tensor>,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let n = p.len();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            slot.steps += 1;
            let g = grads.get(name);
            let grad = |i: usize| g.map_or(0.0, |g| g.data()[i]);
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(slot.steps);
                    let c2 = 1.0 - ADAM_BETA2.powi(slot.steps);
                    for i in 0..n {
                        let gi = grad(i);
                        slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * gi;
                        slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = slot.m[i] / c1;
                        let v_hat = slot.v[i] / c2;
                        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..n {
                        slot.m[i] = self.momentum * slot.m[i] + grad(i);
                        data[i] -= lr * slot.m[i];
                    }
                }
            }
        }
        Ok(())
    }
}
