use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer choice and hyperparameters. The moment parameters are ignored
/// by plain SGD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::argument("optimizer", msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Optimizer state for one parameter registry.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    overrides: Vec<(ParamId, f64)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    /// Fresh state for `store`. `overrides` assigns a separate learning rate
    /// to individual parameters. A learning rate of zero is accepted here and
    /// leaves every parameter untouched.
    pub fn new(spec: OptimizerSpec, store: &ParamStore, overrides: Vec<(ParamId, f64)>) -> Result<Self> {
        if !(spec.learning_rate >= 0.0) || overrides.iter().any(|&(_, lr)| !(lr >= 0.0)) {
            return Err(Error::argument("optimizer", "learning rates must be non-negative"));
        }
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            spec,
            overrides,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn rate(&self, id: ParamId) -> f64 {
        self.overrides
            .iter()
            .find(|(p, _)| *p == id)
            .map_or(self.spec.learning_rate, |&(_, lr)| lr)
    }

    /// Applies one update from `grads` (registry order).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::argument(
                "optimizer",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "optimizer" });
        }
        self.steps += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        match self.spec.kind {
            OptimizerKind::Sgd => {
                for (id, g) in ids.into_iter().zip(grads) {
                    let lr = self.rate(id);
                    for (p, gi) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerSpec {
                    beta1, beta2, epsilon, ..
                } = self.spec;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, (id, g)) in ids.into_iter().zip(grads).enumerate() {
                    let lr = self.rate(id);
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    let p = store.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        if store.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite { op: "optimizer" });
        }
        Ok(())
    }
}
