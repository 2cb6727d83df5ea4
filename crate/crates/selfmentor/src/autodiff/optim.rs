//! Trainable parameters and the RMSprop update rule.

use super::Tensor;
use crate::error::{Error, Result};

/// RMSprop settings. Defaults follow the training recipe used throughout:
/// learning rate 1e-4, discount 0.9, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub discount: f32,
    pub epsilon: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            discount: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Contract(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::Contract(format!(
                "discount must lie in (0,1), got {}",
                self.discount
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Contract(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// A trainable tensor plus its RMSprop squared-gradient accumulator.
///
/// Clones share storage, so a `Parameter` handed to the optimizer updates the
/// network that owns it.
#[derive(Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub rms_accumulator: Tensor,
}

impl Parameter {
    /// Wraps a leaf tensor, enabling gradient tracking and zeroing the
    /// accumulator.
    pub fn new(value: Tensor) -> Parameter {
        value.set_tracked(true);
        let rms_accumulator = Tensor::zeros(value.shape());
        Parameter {
            value,
            rms_accumulator,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// One RMSprop step over `params`:
/// `acc <- discount*acc + (1-discount)*g^2` and
/// `value <- value - lr * g / sqrt(acc + eps)`.
///
/// Gradients are cleared afterwards. A parameter without a gradient buffer is
/// treated as having gradient zero: its value is untouched and its
/// accumulator decays.
pub fn rmsprop_step(params: &[Parameter], config: &OptimizerConfig) {
    let lr = config.learning_rate;
    let d = config.discount;
    let eps = config.epsilon;
    for p in params {
        match p.value.take_grad() {
            Some(g) => {
                let mut value = p.value.data_mut();
                let mut acc = p.rms_accumulator.data_mut();
                for ((vi, ai), gi) in value.iter_mut().zip(acc.iter_mut()).zip(g.iter()) {
                    *ai = d * *ai + (1.0 - d) * gi * gi;
                    *vi -= lr * gi / (*ai + eps).sqrt();
                }
            }
            None => {
                let mut acc = p.rms_accumulator.data_mut();
                for ai in acc.iter_mut() {
                    *ai *= d;
                }
            }
        }
    }
}
