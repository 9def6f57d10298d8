use super::{check_grad, check_input, with_batch, Layer, LayerSpec, Mode};
use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Reshape {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    batch: Option<usize>,
}

impl Reshape {
    pub fn new(in_shape: &[usize], out_shape: &[usize]) -> Result<Self> {
        if in_shape.iter().product::<usize>() != out_shape.iter().product::<usize>() {
            return Err(SevenError::ShapeMismatch {
                op: "reshape layer",
                left: in_shape.to_vec(),
                right: out_shape.to_vec(),
            });
        }
        Ok(Reshape {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            batch: None,
        })
    }
}

fn regroup(x: &Tensor, from: &[usize], to: &[usize], op: &'static str) -> Result<Tensor> {
    check_input(op, x, from)?;
    x.reshape(&with_batch(x.batch(), to))
}

impl Layer for Reshape {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Reshape {
            shape: self.out_shape.clone(),
        }
    }

    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.batch = Some(x.batch());
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        regroup(x, &self.in_shape, &self.out_shape, "reshape")
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let b = self
            .batch
            .take()
            .ok_or(SevenError::BackwardBeforeForward("reshape"))?;
        check_grad("reshape backward", grad_out, &with_batch(b, &self.out_shape))?;
        grad_out.reshape(&with_batch(b, &self.in_shape))
    }

    fn boxed_clone(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Collapses all per-sample axes into one.
#[derive(Clone)]
pub struct Flatten {
    inner: Reshape,
}

impl Flatten {
    pub fn new(in_shape: &[usize]) -> Self {
        let n = in_shape.iter().product();
        Flatten {
            inner: Reshape::new(in_shape, &[n]).expect("flatten preserves size"),
        }
    }
}

impl Layer for Flatten {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten
    }

    fn output_shape(&self) -> &[usize] {
        self.inner.output_shape()
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.inner.forward(x, mode, rng)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.infer(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        self.inner.backward(grad_out)
    }

    fn boxed_clone(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}
