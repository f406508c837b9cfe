//! Non-private reference optimizers.
//!
//! These are the baselines DP-Adam-AC is compared against, and [`adam_update`]
//! is also the moment/bias-correction kernel the private optimizer reuses.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::ParameterVector;

/// Moment buffers and step counter for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ParameterVector,
    pub second_moment: ParameterVector,
    pub momentum: ParameterVector,
    step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            first_moment: ParameterVector::zeros(dim),
            second_moment: ParameterVector::zeros(dim),
            momentum: ParameterVector::zeros(dim),
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }

    /// Number of completed steps. The next update uses `step() + 1`.
    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("learning rate must be positive, got {lr}")))
    }
}

fn check_step_inputs(theta: &[f64], grad: &[f64], state: &OptimizerState) -> Result<()> {
    check_len(state.dim(), theta.len())?;
    check_len(state.dim(), grad.len())?;
    check_finite(grad, "gradient")
}

/// SGD with momentum: `m ← βm + (1−β)g`, `θ ← θ − ηm`.
pub fn sgd_momentum_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_step_inputs(theta, grad, state)?;
    check_lr(lr)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    state.step += 1;
    for ((p, m), g) in theta.iter_mut().zip(state.momentum.iter_mut()).zip(grad) {
        *m = momentum * *m + (1.0 - momentum) * g;
        *p -= lr * *m;
    }
    Ok(())
}

/// One Adam update with bias correction at the state's next step index.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    check_step_inputs(theta, grad, state)?;
    check_lr(lr)?;
    hyper.validate()?;
    adam_update(theta, grad, state, lr, hyper);
    Ok(())
}

/// AdamW: decoupled decay `θ ← θ − ηλθ`, then the Adam step on the decayed θ.
pub fn adamw_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    hyper: &AdamHyper,
    weight_decay: f64,
) -> Result<()> {
    check_step_inputs(theta, grad, state)?;
    check_lr(lr)?;
    hyper.validate()?;
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::config(format!("weight decay must be >= 0, got {weight_decay}")));
    }
    if weight_decay != 0.0 {
        let keep = lr * weight_decay;
        for p in theta.iter_mut() {
            *p -= keep * *p;
        }
    }
    adam_update(theta, grad, state, lr, hyper);
    Ok(())
}

/// Unchecked Adam kernel. Callers validate lengths and hyperparameters.
pub(crate) fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    hyper: &AdamHyper,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for ((p, (m, v)), g) in theta.iter_mut().zip(moments).zip(grad) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * (g * g);
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}
