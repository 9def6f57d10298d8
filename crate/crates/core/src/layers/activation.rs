use serde::{Deserialize, Serialize};

use super::{check_grad, check_input, Layer, LayerSpec, Mode};
use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            ActivationKind::Relu => v.max(0.0),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            ActivationKind::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => y * (1.0 - y),
            ActivationKind::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone)]
pub struct Activation {
    kind: ActivationKind,
    shape: Vec<usize>,
    output: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind, shape: &[usize]) -> Self {
        Activation {
            kind,
            shape: shape.to_vec(),
            output: None,
        }
    }
}

impl Layer for Activation {
    fn spec(&self) -> LayerSpec {
        match self.kind {
            ActivationKind::Relu => LayerSpec::Relu,
            ActivationKind::Sigmoid => LayerSpec::Sigmoid,
            ActivationKind::Tanh => LayerSpec::Tanh,
        }
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("activation", x, &self.shape)?;
        Ok(x.map(|v| self.kind.apply(v)))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let y = self
            .output
            .take()
            .ok_or(SevenError::BackwardBeforeForward("activation"))?;
        check_grad("activation backward", grad_out, y.shape())?;
        let kind = self.kind;
        let data = y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&y, &g)| g * kind.derivative_from_output(y))
            .collect();
        Tensor::new(y.shape().to_vec(), data)
    }

    fn boxed_clone(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        let relu = Activation::new(ActivationKind::Relu, &[3]);
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu.infer(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(ActivationKind::Sigmoid.apply(0.0), 0.5);
        // tanh(1) = 0.76159415595576488812...
        assert!((ActivationKind::Tanh.apply(1.0) - 0.761_594_155_955_764_9).abs() < 1e-15);
    }
}
