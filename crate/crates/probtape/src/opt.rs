//! Parameter-update rules. Losses are always minimized: the step moves
//! parameters along the negative of the supplied gradient.

use std::collections::{BTreeMap, HashMap};

use crate::error::Result;
use crate::tape::{Param, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    RmsProp,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    pub eps: f64,
    /// RMSProp mean-square decay.
    pub decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, lr, beta1: 0.0, beta2: 0.0, eps: 0.0, decay: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.0,
        }
    }

    /// RMSProp in the mean-square form: p -= lr * g / sqrt(v + eps).
    pub fn rmsprop(lr: f64, eps: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmsProp,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps,
            decay: 0.9,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(0.001)
    }
}

/// Stateful optimizer; moment slots are keyed by parameter.
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    step: usize,
    m: HashMap<Param, Tensor>,
    v: HashMap<Param, Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer { cfg, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Pre-registers zeroed slots for the given parameters.
    pub fn ensure_slots(&mut self, store: &ParamStore, params: &[Param]) {
        for &p in params {
            let shape = store.get(p).shape().to_vec();
            self.m.entry(p).or_insert_with(|| Tensor::zeros(&shape));
            self.v.entry(p).or_insert_with(|| Tensor::zeros(&shape));
        }
    }

    pub fn slot_count(&self) -> usize {
        self.m.len()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        for t in self.v.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }

    /// One update. If any gradient element is non-finite the whole step is
    /// skipped and `Ok(false)` is returned; parameters are left untouched.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<Param, Tensor>,
    ) -> Result<bool> {
        for g in grads.values() {
            if !g.all_finite() {
                return Ok(false);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (&p, g) in grads {
            let mut value = store.get(p).clone();
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    for (x, &gi) in value.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.cfg.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let shape = value.shape().to_vec();
                    let m = self.m.entry(p).or_insert_with(|| Tensor::zeros(&shape));
                    let v = self.v.entry(p).or_insert_with(|| Tensor::zeros(&shape));
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - b2.powi(t);
                    for i in 0..value.len() {
                        let gi = g.data()[i];
                        m.data_mut()[i] = b1 * m.data()[i] + (1.0 - b1) * gi;
                        v.data_mut()[i] = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                        let m_hat = m.data()[i] / bc1;
                        let v_hat = v.data()[i] / bc2;
                        value.data_mut()[i] -=
                            self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                    }
                }
                OptimizerKind::RmsProp => {
                    let shape = value.shape().to_vec();
                    let v = self.v.entry(p).or_insert_with(|| Tensor::zeros(&shape));
                    let rho = self.cfg.decay;
                    for i in 0..value.len() {
                        let gi = g.data()[i];
                        v.data_mut()[i] = rho * v.data()[i] + (1.0 - rho) * gi * gi;
                        value.data_mut()[i] -=
                            self.cfg.lr * gi / (v.data()[i] + self.cfg.eps).sqrt();
                    }
                }
            }
            store.set(p, value)?;
        }
        Ok(true)
    }
}

impl std::fmt::Debug for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Optimizer")
            .field("kind", &self.cfg.kind)
            .field("lr", &self.cfg.lr)
            .field("step", &self.step)
            .field("slots", &self.m.len())
            .finish()
    }
}

/// Gradient-descent oracle used by tests and benchmarks: plain SGD on an
/// explicit gradient function, no tape involved.
pub fn descend(
    mut theta: Vec<f64>,
    lr: f64,
    steps: usize,
    grad: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    for _ in 0..steps {
        let g = grad(&theta);
        for (x, gi) in theta.iter_mut().zip(g) {
            *x -= lr * gi;
        }
    }
    theta
}
