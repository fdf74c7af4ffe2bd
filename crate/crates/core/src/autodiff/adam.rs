use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let bad = |msg: String| Err(AutodiffError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients and advances the step counter.
pub fn adam_step(params: &mut ParamSet, config: &AdamConfig) -> Result<(), AutodiffError> {
    config.validate()?;
    let t = params.step() + 1;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for (_, entry) in params.iter_mut() {
        let grad = entry.grad.data().to_vec();
        let (m, v) = (entry.m.data_mut(), entry.v.data_mut());
        for ((mi, vi), g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
        }
        let (m, v) = (entry.m.data().to_vec(), entry.v.data().to_vec());
        for ((p, mi), vi) in entry.value.data_mut().iter_mut().zip(&m).zip(&v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *p -= config.lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        entry.grad.data_mut().fill(0.0);
    }
    params.set_step(t);
    Ok(())
}
