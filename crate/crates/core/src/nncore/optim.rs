use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// RMSProp hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-5,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes the parameters, which tests rely on.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1)", self.decay)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// A trainable tensor with its gradient and RMSProp accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub gradient: Tensor,
    pub rms_accumulator: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            gradient: zeros.clone(),
            rms_accumulator: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn set_gradient(&mut self, gradient: Tensor) -> Result<()> {
        if !gradient.same_shape(&self.value) {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {:?}",
                gradient.shape(),
                self.value.shape()
            )));
        }
        self.gradient = gradient;
        Ok(())
    }
}

/// One RMSProp update:
/// `acc = decay * acc + (1 - decay) * g^2`, `value -= lr * g / (sqrt(acc) + eps)`.
pub fn rmsprop_step(param: &mut Parameter, cfg: &OptimizerConfig) {
    let Parameter {
        value,
        gradient,
        rms_accumulator,
    } = param;
    for ((v, &g), acc) in value
        .data_mut()
        .iter_mut()
        .zip(gradient.data())
        .zip(rms_accumulator.data_mut())
    {
        *acc = cfg.decay * *acc + (1.0 - cfg.decay) * g * g;
        *v -= cfg.learning_rate * g / (acc.sqrt() + cfg.epsilon);
    }
}
