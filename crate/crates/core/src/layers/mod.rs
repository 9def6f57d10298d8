//! Layer kernels with explicit forward and backward passes.
//!
//! Image tensors are `[batch, channels, height, width]`; dense tensors are
//! `[batch, features]`. Each layer caches what its backward pass needs during
//! a training forward; [`Layer::infer`] is the cache-free evaluation path and
//! only needs `&self`, so a frozen network can be shared across threads.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod pool;
mod reshape;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use activation::{Activation, ActivationKind};
pub use batchnorm::{BatchNorm, BN_EPSILON, BN_MOMENTUM};
pub use conv::{same_padding, Conv2d, ConvTranspose2d};
pub use dense::Dense;
pub use dropout::Dropout;
pub use pool::{MaxPool2d, Upsample2d};
pub use reshape::{Flatten, Reshape};

use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative description of one layer. Shapes are inferred at build time
/// from the preceding layer's per-sample output shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: (usize, usize),
        out_channels: usize,
    },
    TransConv {
        kernel: (usize, usize),
        out_channels: usize,
    },
    MaxPool {
        factor: (usize, usize),
    },
    /// Nearest-neighbour upsampling. `target` overrides the output extent so
    /// a decoder can restore a pre-pool size that was not divisible.
    Upsample {
        factor: (usize, usize),
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<(usize, usize)>,
    },
    Dense {
        out_units: usize,
    },
    Relu,
    Sigmoid,
    Tanh,
    BatchNorm,
    Dropout {
        rate: f64,
    },
    /// Per-sample target shape; the batch axis is kept.
    Reshape {
        shape: Vec<usize>,
    },
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, (h, w): (usize, usize)| {
            if h == 0 || w == 0 {
                Err(SevenError::invalid(format!("{what} extents must be >= 1")))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Conv {
                kernel,
                out_channels,
            }
            | LayerSpec::TransConv {
                kernel,
                out_channels,
            } => {
                positive("kernel", *kernel)?;
                if *out_channels == 0 {
                    return Err(SevenError::invalid("out_channels must be >= 1"));
                }
            }
            LayerSpec::MaxPool { factor } => positive("pool factor", *factor)?,
            LayerSpec::Upsample { factor, target } => {
                positive("upsample factor", *factor)?;
                if let Some(t) = target {
                    positive("upsample target", *t)?;
                }
            }
            LayerSpec::Dense { out_units } if *out_units == 0 => {
                return Err(SevenError::invalid("out_units must be >= 1"));
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                return Err(SevenError::invalid(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
            LayerSpec::Reshape { shape } if shape.is_empty() || shape.contains(&0) => {
                return Err(SevenError::invalid(format!("bad reshape target {shape:?}")));
            }
            _ => {}
        }
        Ok(())
    }
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample `input` shape, without
    /// allocating parameters.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let image = || -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(SevenError::invalid(format!(
                    "{self:?} needs [channels, height, width] input, got {input:?}"
                ))),
            }
        };
        Ok(match self {
            LayerSpec::Conv { out_channels, .. } | LayerSpec::TransConv { out_channels, .. } => {
                let (_, h, w) = image()?;
                vec![*out_channels, h, w]
            }
            LayerSpec::MaxPool { factor } => {
                let (c, h, w) = image()?;
                if h < factor.0 || w < factor.1 {
                    return Err(SevenError::invalid(format!(
                        "pool factor {factor:?} larger than input {h}x{w}"
                    )));
                }
                vec![c, h / factor.0, w / factor.1]
            }
            LayerSpec::Upsample { factor, target } => {
                let (c, h, w) = image()?;
                let (oh, ow) = target.unwrap_or((h * factor.0, w * factor.1));
                vec![c, oh, ow]
            }
            LayerSpec::Dense { out_units } => match input {
                [_] => vec![*out_units],
                _ => {
                    return Err(SevenError::invalid(format!(
                        "dense needs flattened input, got {input:?}"
                    )))
                }
            },
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(SevenError::ShapeMismatch {
                        op: "reshape layer",
                        left: input.to_vec(),
                        right: shape.clone(),
                    });
                }
                shape.clone()
            }
            LayerSpec::Flatten => vec![input.iter().product()],
            LayerSpec::Relu
            | LayerSpec::Sigmoid
            | LayerSpec::Tanh
            | LayerSpec::BatchNorm
            | LayerSpec::Dropout { .. } => input.to_vec(),
        })
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: &'static str,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether the parameter takes part in weight regularization.
    pub decay: bool,
}

impl Param {
    pub fn new(name: &'static str, value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name,
            value,
            grad,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// A non-trainable state tensor (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: &'static str,
    pub value: Tensor,
}

pub trait Layer: Send + Sync {
    fn spec(&self) -> LayerSpec;

    /// Per-sample output shape.
    fn output_shape(&self) -> &[usize];

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor>;

    /// Evaluation-mode forward without caching.
    fn infer(&self, x: &Tensor) -> Result<Tensor>;

    /// Consumes the cache of the last training forward, accumulates parameter
    /// gradients, and returns the gradient with respect to the layer input.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn buffers(&self) -> Vec<&Buffer> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        Vec::new()
    }

    fn boxed_clone(&self) -> Box<dyn Layer>;
}

impl Clone for Box<dyn Layer> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Checks that `x` is `[batch, ..per_sample]`.
pub(crate) fn check_input(layer: &'static str, x: &Tensor, per_sample: &[usize]) -> Result<()> {
    if &x.shape()[1..] != per_sample {
        let mut expected = vec![x.batch()];
        expected.extend_from_slice(per_sample);
        return Err(SevenError::ShapeMismatch {
            op: layer,
            left: x.shape().to_vec(),
            right: expected,
        });
    }
    Ok(())
}

pub(crate) fn check_grad(layer: &'static str, grad: &Tensor, expected: &[usize]) -> Result<()> {
    if grad.shape() != expected {
        return Err(SevenError::ShapeMismatch {
            op: layer,
            left: grad.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn with_batch(batch: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut shape = Vec::with_capacity(per_sample.len() + 1);
    shape.push(batch);
    shape.extend_from_slice(per_sample);
    shape
}

/// Instantiates a layer for inputs of per-sample shape `input`.
pub fn build_layer(spec: &LayerSpec, input: &[usize], rng: &mut Rng) -> Result<Box<dyn Layer>> {
    spec.validate()?;
    let image = |what: &str| -> Result<(usize, usize, usize)> {
        match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(SevenError::invalid(format!(
                "{what} needs [channels, height, width] input, got {input:?}"
            ))),
        }
    };
    Ok(match spec {
        LayerSpec::Conv {
            kernel,
            out_channels,
        } => {
            let (c, h, w) = image("conv")?;
            Box::new(Conv2d::new(c, *out_channels, *kernel, (h, w), rng))
        }
        LayerSpec::TransConv {
            kernel,
            out_channels,
        } => {
            let (c, h, w) = image("transconv")?;
            Box::new(ConvTranspose2d::new(c, *out_channels, *kernel, (h, w), rng))
        }
        LayerSpec::MaxPool { factor } => {
            let (c, h, w) = image("maxpool")?;
            Box::new(MaxPool2d::new(c, (h, w), *factor)?)
        }
        LayerSpec::Upsample { factor, target } => {
            let (c, h, w) = image("upsample")?;
            Box::new(Upsample2d::new(c, (h, w), *factor, *target)?)
        }
        LayerSpec::Dense { out_units } => match *input {
            [k] => Box::new(Dense::new(k, *out_units, rng)),
            _ => {
                return Err(SevenError::invalid(format!(
                    "dense needs flattened input, got {input:?}"
                )))
            }
        },
        LayerSpec::Relu => Box::new(Activation::new(ActivationKind::Relu, input)),
        LayerSpec::Sigmoid => Box::new(Activation::new(ActivationKind::Sigmoid, input)),
        LayerSpec::Tanh => Box::new(Activation::new(ActivationKind::Tanh, input)),
        LayerSpec::BatchNorm => Box::new(BatchNorm::new(input)?),
        LayerSpec::Dropout { rate } => Box::new(Dropout::new(*rate, input)),
        LayerSpec::Reshape { shape } => Box::new(Reshape::new(input, shape)?),
        LayerSpec::Flatten => Box::new(Flatten::new(input)),
    })
}
