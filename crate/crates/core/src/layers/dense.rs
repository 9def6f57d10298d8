use super::{check_grad, check_input, glorot_uniform, Layer, LayerSpec, Mode, Param};
use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::{gemm, MatRef, Tensor};

/// Fully connected layer `y = x W + b` on `[batch, in]` inputs.
#[derive(Clone)]
pub struct Dense {
    in_units: usize,
    out_shape: Vec<usize>,
    /// `[in, out]`
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new(in_units: usize, out_units: usize, rng: &mut Rng) -> Self {
        let weight = glorot_uniform(&[in_units, out_units], in_units, out_units, rng);
        Dense {
            in_units,
            out_shape: vec![out_units],
            weight: Param::new("weight", weight, true),
            bias: Param::new("bias", Tensor::zeros(&[out_units]), false),
            input: None,
        }
    }

    pub fn set_weights(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        check_grad("dense weight", &weight, self.weight.value.shape())?;
        check_grad("dense bias", &bias, self.bias.value.shape())?;
        self.weight.value = weight;
        self.bias.value = bias;
        Ok(())
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        x.dims2()?;
        check_input("dense", x, &[self.in_units])?;
        let b = x.batch();
        let u = self.out_shape[0];
        let mut out = Tensor::from_fn(&[b, u], |i| self.bias.value.data()[i % u]);
        gemm(
            1.0,
            MatRef::row_major(x.data(), b, self.in_units),
            MatRef::row_major(self.weight.value.data(), self.in_units, u),
            1.0,
            out.data_mut(),
        );
        Ok(out)
    }
}

impl Layer for Dense {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            out_units: self.out_shape[0],
        }
    }

    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or(SevenError::BackwardBeforeForward("dense"))?;
        let b = x.batch();
        let u = self.out_shape[0];
        check_grad("dense backward", grad_out, &[b, u])?;
        let g = MatRef::row_major(grad_out.data(), b, u);
        gemm(
            1.0,
            MatRef::row_major(x.data(), b, self.in_units).t(),
            g,
            1.0,
            self.weight.grad.data_mut(),
        );
        let bias_grad = self.bias.grad.data_mut();
        for row in grad_out.data().chunks_exact(u) {
            for (acc, v) in bias_grad.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut grad_in = Tensor::zeros(x.shape());
        gemm(
            1.0,
            g,
            MatRef::row_major(self.weight.value.data(), self.in_units, u).t(),
            0.0,
            grad_in.data_mut(),
        );
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn boxed_clone(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identity_weights_pass_through() {
        let mut r = rng::seeded(0);
        let mut d = Dense::new(3, 3, &mut r);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        d.set_weights(eye, Tensor::zeros(&[3])).unwrap();
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        assert_eq!(d.infer(&x).unwrap(), x);
    }

    #[test]
    fn rejects_unflattened_input() {
        let mut r = rng::seeded(0);
        let d = Dense::new(4, 2, &mut r);
        assert!(d.infer(&Tensor::zeros(&[1, 1, 2, 2])).is_err());
        assert!(d.infer(&Tensor::zeros(&[1, 5])).is_err());
    }
}
