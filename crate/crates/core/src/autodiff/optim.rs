//! Momentum SGD with coupled weight decay, and a step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result, SfeError};
use crate::tensor::{Scalar, Tensor};

use super::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One velocity buffer per parameter, zero-initialized.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        SgdState {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }
}

/// `v ← μ·v + g + λ·θ;  θ ← θ − lr·v`
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    ensure!(lr > 0.0, SfeError::config(format!("learning rate must be positive, got {lr}")));
    ensure!(
        state.velocity.len() == params.len(),
        SfeError::config("optimizer state does not match the parameter set")
    );
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let (theta, g) = (p.value.data_mut(), p.grad.data());
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.data_mut()) {
            *vi = mu * *vi + gi + wd * *t;
            *t = *t - lr * *vi;
        }
        if !p.value.all_finite() {
            return Err(SfeError::numeric(format!("parameter {} became non-finite", p.name)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Epochs at which the rate is multiplied by `factor`, ascending.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        LrSchedule {
            base_lr,
            milestones: Vec::new(),
            factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.base_lr > 0.0,
            SfeError::config(format!("base learning rate must be positive, got {}", self.base_lr))
        );
        ensure!(
            self.milestones.windows(2).all(|w| w[0] <= w[1]),
            SfeError::config("learning-rate milestones must be sorted ascending")
        );
        ensure!(
            self.factor > 0.0 && self.factor <= 1.0,
            SfeError::config("learning-rate decay factor must lie in (0, 1]")
        );
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}
