//! RMSProp.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SevenError};
use crate::layers::Param;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// Per-element update `acc = rho*acc + (1-rho)*g^2; theta -= lr*g/sqrt(acc+eps)`.
/// Accumulators are keyed by parameter name and created lazily at zero.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    acc: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        RmsProp {
            config,
            acc: BTreeMap::new(),
        }
    }

    pub fn accumulators(&self) -> &BTreeMap<String, Tensor> {
        &self.acc
    }

    /// Restores accumulator state, e.g. from a checkpoint.
    pub fn set_accumulator(&mut self, name: String, value: Tensor) {
        self.acc.insert(name, value);
    }

    /// Applies one update from each parameter's gradient, then zeroes the
    /// gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Param)>) -> Result<()> {
        let RmsPropConfig { lr, rho, eps } = self.config;
        for (name, p) in params {
            if p.grad.shape() != p.value.shape() {
                return Err(SevenError::ShapeMismatch {
                    op: "rmsprop gradient",
                    left: p.grad.shape().to_vec(),
                    right: p.value.shape().to_vec(),
                });
            }
            let acc = self
                .acc
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            if acc.shape() != p.value.shape() {
                return Err(SevenError::ShapeMismatch {
                    op: "rmsprop accumulator",
                    left: acc.shape().to_vec(),
                    right: p.value.shape().to_vec(),
                });
            }
            let grads = p.grad.data();
            for ((a, v), &g) in acc.data_mut().iter_mut().zip(p.value.data_mut()).zip(grads) {
                *a = rho * *a + (1.0 - rho) * g * g;
                *v -= lr * g / (*a + eps).sqrt();
            }
            p.zero_grad();
        }
        Ok(())
    }
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Param>) {
    for p in params {
        p.zero_grad();
    }
}
