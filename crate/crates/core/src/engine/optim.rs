//! Optimizers and learning-rate schedules.
//!
//! Update rules follow the classic Keras formulations: SGD momentum keeps a
//! velocity `v = m v - lr g`, Adam folds the bias correction into the step
//! size and uses `epsilon = 1e-7`, RMSprop divides by the root of a running
//! mean of squared gradients.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::grammar::AttributeList;
use crate::Scalar;

pub const OPTIMIZER_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    GradientDescent { momentum: f64, nesterov: bool },
    Adam { beta1: f64, beta2: f64 },
    Rmsprop { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr / (1 + decay * t)` with `t` the number of updates so far.
    InverseTime { decay: f64 },
    /// Half-cosine from `lr` to zero over `total_steps` updates.
    Cosine { total_steps: u64 },
    /// Multiply by `factor` at each listed epoch.
    Step { factor: f64, epochs: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LearningError {
    #[error("learning unit lacks `{0}`")]
    Missing(&'static str),
    #[error("unknown optimizer `{0}`")]
    UnknownOptimizer(alloc::string::String),
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: u64, epoch: usize) -> f64 {
        match &self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InverseTime { decay } => self.lr / (1.0 + decay * step as f64),
            LrSchedule::Cosine { total_steps } => {
                let t = (step.min(*total_steps)) as f64 / (*total_steps).max(1) as f64;
                self.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
            LrSchedule::Step { factor, epochs } => {
                let k = epochs.iter().filter(|&&e| epoch >= e).count();
                self.lr * libm::pow(*factor, k as f64)
            }
        }
    }

    /// Reads a decoded learning unit (`learning`, `lr`, `decay`, and the
    /// optimizer's own parameters).
    pub fn from_attributes(attrs: &AttributeList) -> Result<Self, LearningError> {
        let num = |k: &'static str| attrs.number(k).ok_or(LearningError::Missing(k));
        let kind = match attrs.text("learning").ok_or(LearningError::Missing("learning"))? {
            "gradient-descent" => OptimizerKind::GradientDescent {
                momentum: num("momentum")?,
                nesterov: attrs.flag("nesterov").ok_or(LearningError::Missing("nesterov"))?,
            },
            "adam" => OptimizerKind::Adam { beta1: num("beta1")?, beta2: num("beta2")? },
            "rmsprop" => OptimizerKind::Rmsprop { rho: num("rho")? },
            other => return Err(LearningError::UnknownOptimizer(other.into())),
        };
        Ok(OptimizerConfig { kind, lr: num("lr")?, schedule: LrSchedule::InverseTime { decay: num("decay")? } })
    }
}

/// Optimizer state, one slot vector per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub updates: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, net: &Network<T>) -> Self {
        let zeros: Vec<Vec<T>> = net.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        let second = match config.kind {
            OptimizerKind::GradientDescent { .. } => Vec::new(),
            _ => zeros.clone(),
        };
        Optimizer { config, first: zeros, second, updates: 0 }
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: f64) {
        self.updates += 1;
        let eps = T::of(OPTIMIZER_EPSILON);
        let kind = self.config.kind.clone();
        for (i, p) in net.params_mut().into_iter().enumerate() {
            let g = &grads.params[i];
            match kind {
                OptimizerKind::GradientDescent { momentum, nesterov } => {
                    let (m, lr) = (T::of(momentum), T::of(lr));
                    for ((w, v), &gj) in p.iter_mut().zip(self.first[i].iter_mut()).zip(g) {
                        *v = m * *v - lr * gj;
                        *w += if nesterov { m * *v - lr * gj } else { *v };
                    }
                }
                OptimizerKind::Adam { beta1, beta2 } => {
                    let t = self.updates as f64;
                    let lr_t = T::of(
                        lr * libm::sqrt(1.0 - libm::pow(beta2, t)) / (1.0 - libm::pow(beta1, t)),
                    );
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let one = T::one();
                    for (((w, m), v), &gj) in
                        p.iter_mut().zip(self.first[i].iter_mut()).zip(self.second[i].iter_mut()).zip(g)
                    {
                        *m = b1 * *m + (one - b1) * gj;
                        *v = b2 * *v + (one - b2) * gj * gj;
                        *w -= lr_t * *m / (v.sqrt() + eps);
                    }
                }
                OptimizerKind::Rmsprop { rho } => {
                    let (r, lr) = (T::of(rho), T::of(lr));
                    let one = T::one();
                    for ((w, a), &gj) in p.iter_mut().zip(self.first[i].iter_mut()).zip(g) {
                        *a = r * *a + (one - r) * gj * gj;
                        *w -= lr * gj / (a.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::layers::LayerSpec;
    use crate::Rng as Stream;
    use rand::SeedableRng;

    fn one_weight() -> Network<f64> {
        let mut net =
            Network::sequential([1, 1, 1], &[LayerSpec::Dense { units: 1, bias: false }], &mut Stream::seed_from_u64(0))
                .unwrap();
        net.nodes[0].layers[0].params[0][0] = 1.0;
        net
    }

    fn run(kind: OptimizerKind, grads: &[f64], lr: f64) -> f64 {
        let mut net = one_weight();
        let mut opt = Optimizer::new(OptimizerConfig { kind, lr, schedule: LrSchedule::Constant }, &net);
        for &g in grads {
            opt.step(&mut net, &Gradients { params: vec![vec![g]] }, lr);
        }
        net.nodes[0].layers[0].params[0][0]
    }

    #[test]
    fn inverse_time_decay() {
        let c = OptimizerConfig {
            kind: OptimizerKind::Rmsprop { rho: 0.9 },
            lr: 0.1,
            schedule: LrSchedule::InverseTime { decay: 0.01 },
        };
        assert!((c.lr_at(100, 0) - 0.05).abs() < 1e-15);
        assert_eq!(c.lr_at(0, 0), 0.1);
    }

    #[test]
    fn step_and_cosine_schedules() {
        let s = OptimizerConfig {
            kind: OptimizerKind::Rmsprop { rho: 0.9 },
            lr: 0.1,
            schedule: LrSchedule::Step { factor: 0.1, epochs: vec![100, 150] },
        };
        assert_eq!(s.lr_at(0, 99), 0.1);
        assert!((s.lr_at(0, 100) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(0, 150) - 0.001).abs() < 1e-15);
        let c = OptimizerConfig { schedule: LrSchedule::Cosine { total_steps: 10 }, ..s };
        assert!((c.lr_at(5, 0) - 0.05).abs() < 1e-15);
        assert!(c.lr_at(10, 0).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_hand_values() {
        // v1 = -0.1, w1 = 0.9; v2 = 0.5*-0.1 - 0.1 = -0.15, w2 = 0.75
        let w = run(OptimizerKind::GradientDescent { momentum: 0.5, nesterov: false }, &[1.0, 1.0], 0.1);
        assert!((w - 0.75).abs() < 1e-12);
        // nesterov: w1 = 1 + 0.5*-0.1 - 0.1 = 0.85
        let w = run(OptimizerKind::GradientDescent { momentum: 0.5, nesterov: true }, &[1.0], 0.1);
        assert!((w - 0.85).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let w = run(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 }, &[3.0], 0.01);
        // m = 0.3, v = 0.009, lr_t = 0.01 * sqrt(0.001) / 0.1; the epsilon
        // sits outside the bias correction
        let expected = 1.0 - 0.01 * libm::sqrt(0.001) / 0.1 * 0.3 / (libm::sqrt(0.009) + 1e-7);
        assert!((w - expected).abs() < 1e-12);
        assert!((w - 0.99).abs() < 1e-7);
    }

    #[test]
    fn adam_with_unit_beta1_is_non_finite() {
        let w = run(OptimizerKind::Adam { beta1: 1.0, beta2: 0.999 }, &[3.0], 0.01);
        assert!(!w.is_finite());
    }

    #[test]
    fn rmsprop_hand_value() {
        // a = 0.1 * 4 = 0.4; w = 1 - 0.01 * 2 / sqrt(0.4)
        let w = run(OptimizerKind::Rmsprop { rho: 0.9 }, &[2.0], 0.01);
        assert!((w - (1.0 - 0.02 / (libm::sqrt(0.4) + 1e-7))).abs() < 1e-12);
    }
}
