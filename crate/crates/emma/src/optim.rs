//! Per-parameter optimizers with named state slots.
//!
//! The trainer calls [`Optimizer::begin_step`] once per iteration, then
//! [`Optimizer::update`] for each parameter in a fixed order. State is keyed
//! by parameter name so checkpoint round-trips can rebuild it.

use crate::error::{EmmaError, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Rmsprop,
    Adam,
    Adadelta,
}

/// Optimizer selection plus optional hyperparameter overrides. Missing
/// fields fall back to the usual published defaults for the chosen kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerSpec {
            kind,
            learning_rate: None,
            momentum: None,
            rho: None,
            beta1: None,
            beta2: None,
            epsilon: None,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = Some(lr);
        self
    }
}

/// Resolved hyperparameters.
#[derive(Debug, Clone, Copy)]
struct Hyper {
    lr: f64,
    momentum: f64,
    rho: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

enum Slot {
    /// Momentum velocity.
    Velocity(Vec<f64>),
    /// Squared-gradient running average.
    SquareAvg(Vec<f64>),
    /// First and second moment estimates.
    Moments(Vec<f64>, Vec<f64>),
    /// Squared-gradient and squared-update running averages.
    DeltaAvgs(Vec<f64>, Vec<f64>),
}

pub struct Optimizer {
    kind: OptimizerKind,
    hyper: Hyper,
    state: HashMap<String, Slot>,
    step: u64,
}

impl Optimizer {
    pub fn new(spec: &OptimizerSpec) -> Result<Self> {
        let hyper = match spec.kind {
            OptimizerKind::SgdMomentum => Hyper {
                lr: spec.learning_rate.unwrap_or(1e-3),
                momentum: spec.momentum.unwrap_or(0.9),
                rho: 0.0,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
            },
            OptimizerKind::Rmsprop => Hyper {
                lr: spec.learning_rate.unwrap_or(1e-3),
                momentum: 0.0,
                rho: spec.rho.unwrap_or(0.9),
                beta1: 0.0,
                beta2: 0.0,
                eps: spec.epsilon.unwrap_or(1e-8),
            },
            OptimizerKind::Adam => Hyper {
                lr: spec.learning_rate.unwrap_or(1e-3),
                momentum: 0.0,
                rho: 0.0,
                beta1: spec.beta1.unwrap_or(0.9),
                beta2: spec.beta2.unwrap_or(0.999),
                eps: spec.epsilon.unwrap_or(1e-8),
            },
            OptimizerKind::Adadelta => Hyper {
                // Adadelta derives its own step size; learning_rate scales it.
                lr: spec.learning_rate.unwrap_or(1.0),
                momentum: 0.0,
                rho: spec.rho.unwrap_or(0.95),
                beta1: 0.0,
                beta2: 0.0,
                eps: spec.epsilon.unwrap_or(1e-6),
            },
        };
        for (name, v) in [
            ("learning_rate", hyper.lr),
            ("momentum", hyper.momentum),
            ("rho", hyper.rho),
            ("beta1", hyper.beta1),
            ("beta2", hyper.beta2),
            ("epsilon", hyper.eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(EmmaError::Config(format!("optimizer {name} must be finite and >= 0")));
            }
        }
        Ok(Optimizer { kind: spec.kind, hyper, state: HashMap::new(), step: 0 })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Advances the global step counter (Adam bias correction depends on it).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to `param` in place. Fails fast on non-finite
    /// gradients, naming the offending parameter.
    pub fn update<T: Scalar>(&mut self, name: &str, param: &mut [T], grad: &[T]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(EmmaError::Dimension(format!(
                "parameter {name}: gradient length {} does not match parameter length {}",
                grad.len(),
                param.len()
            )));
        }
        if let Some(at) = grad.iter().position(|g| !g.is_finite()) {
            return Err(EmmaError::Numeric(format!(
                "non-finite gradient for parameter {name} at index {at}"
            )));
        }
        let h = self.hyper;
        let n = param.len();
        match self.kind {
            OptimizerKind::SgdMomentum => {
                let Slot::Velocity(v) = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| Slot::Velocity(vec![0.0; n]))
                else {
                    unreachable!("slot kind is fixed per optimizer")
                };
                for i in 0..n {
                    v[i] = h.momentum * v[i] + grad[i].to_f64();
                    param[i] -= T::from_f64(h.lr * v[i]);
                }
            }
            OptimizerKind::Rmsprop => {
                let Slot::SquareAvg(e) = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| Slot::SquareAvg(vec![0.0; n]))
                else {
                    unreachable!("slot kind is fixed per optimizer")
                };
                for i in 0..n {
                    let g = grad[i].to_f64();
                    e[i] = h.rho * e[i] + (1.0 - h.rho) * g * g;
                    param[i] -= T::from_f64(h.lr * g / (e[i].sqrt() + h.eps));
                }
            }
            OptimizerKind::Adam => {
                let t = self.step.max(1) as i32;
                let Slot::Moments(m, v) = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| Slot::Moments(vec![0.0; n], vec![0.0; n]))
                else {
                    unreachable!("slot kind is fixed per optimizer")
                };
                let bc1 = 1.0 - h.beta1.powi(t);
                let bc2 = 1.0 - h.beta2.powi(t);
                for i in 0..n {
                    let g = grad[i].to_f64();
                    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
                    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    param[i] -= T::from_f64(h.lr * m_hat / (v_hat.sqrt() + h.eps));
                }
            }
            OptimizerKind::Adadelta => {
                let Slot::DeltaAvgs(eg, ed) = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| Slot::DeltaAvgs(vec![0.0; n], vec![0.0; n]))
                else {
                    unreachable!("slot kind is fixed per optimizer")
                };
                for i in 0..n {
                    let g = grad[i].to_f64();
                    eg[i] = h.rho * eg[i] + (1.0 - h.rho) * g * g;
                    let delta = -((ed[i] + h.eps).sqrt() / (eg[i] + h.eps).sqrt()) * g;
                    ed[i] = h.rho * ed[i] + (1.0 - h.rho) * delta * delta;
                    param[i] += T::from_f64(h.lr * delta);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_step(kind: OptimizerKind, lr: Option<f64>, theta: f64, g: f64) -> f64 {
        let mut spec = OptimizerSpec::new(kind);
        spec.learning_rate = lr;
        let mut opt = Optimizer::new(&spec).unwrap();
        opt.begin_step();
        let mut p = [theta];
        opt.update("w", &mut p, &[g]).unwrap();
        p[0]
    }

    #[test]
    fn sgd_momentum_first_step_is_plain_descent() {
        // First step: v = g, theta -= lr * g.
        let p = one_param_step(OptimizerKind::SgdMomentum, Some(0.1), 1.0, 0.5);
        assert!((p - (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_second_step_compounds_velocity() {
        let spec = OptimizerSpec::new(OptimizerKind::SgdMomentum).with_learning_rate(0.1);
        let mut opt = Optimizer::new(&spec).unwrap();
        let mut p = [1.0f64];
        opt.begin_step();
        opt.update("w", &mut p, &[0.5]).unwrap();
        opt.begin_step();
        opt.update("w", &mut p, &[0.5]).unwrap();
        // v1 = 0.5, v2 = 0.9*0.5 + 0.5 = 0.95; theta = 1 - 0.1*(0.5 + 0.95).
        assert!((p[0] - (1.0 - 0.1 * 1.45)).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_first_step_matches_closed_form() {
        // E = 0.1*g^2, step = lr*g / (sqrt(E) + eps).
        let g: f64 = 0.5;
        let e = 0.1 * g * g;
        let expected = 1.0 - 0.01 * g / (e.sqrt() + 1e-8);
        let p = one_param_step(OptimizerKind::Rmsprop, Some(0.01), 1.0, g);
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // Bias correction makes the first step lr * g / (|g| + eps).
        let p = one_param_step(OptimizerKind::Adam, Some(0.1), 0.0, 0.5);
        let expected = -0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        assert!((p - (-0.099_999_998_0)).abs() < 1e-9);
    }

    #[test]
    fn adadelta_first_step_matches_closed_form() {
        let g: f64 = 1.0;
        let eg = 0.05 * g * g;
        let expected = -((1e-6f64).sqrt() / (eg + 1e-6).sqrt()) * g;
        let p = one_param_step(OptimizerKind::Adadelta, None, 0.0, g);
        assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let spec = OptimizerSpec::new(OptimizerKind::Adam);
        let mut opt = Optimizer::new(&spec).unwrap();
        opt.begin_step();
        let mut p = [1.0f64, 2.0];
        let err = opt.update("conv1.kernel", &mut p, &[0.1, f64::NAN]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv1.kernel"), "message was: {msg}");
    }

    #[test]
    fn state_is_kept_per_parameter() {
        let spec = OptimizerSpec::new(OptimizerKind::SgdMomentum).with_learning_rate(1.0);
        let mut opt = Optimizer::new(&spec).unwrap();
        let (mut a, mut b) = ([0.0f64], [0.0f64]);
        opt.begin_step();
        opt.update("a", &mut a, &[1.0]).unwrap();
        opt.update("b", &mut b, &[2.0]).unwrap();
        opt.begin_step();
        opt.update("a", &mut a, &[0.0]).unwrap();
        // a's velocity decays from its own history, untouched by b.
        assert!((a[0] - (-1.9)).abs() < 1e-12, "a {}", a[0]);
    }
}
