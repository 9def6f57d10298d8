use rand::Rng as _;

use super::{check_grad, check_input, Layer, LayerSpec, Mode};
use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at train time so
/// evaluation is the identity.
#[derive(Clone)]
pub struct Dropout {
    rate: f64,
    shape: Vec<usize>,
    /// Per-unit multiplier (0 or the survivor scale) of the last forward.
    mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(rate: f64, shape: &[usize]) -> Self {
        Dropout {
            rate,
            shape: shape.to_vec(),
            mask: None,
        }
    }
}

impl Layer for Dropout {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dropout { rate: self.rate }
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        check_input("dropout", x, &self.shape)?;
        let mask = if mode == Mode::Train && self.rate > 0.0 {
            let keep = 1.0 - self.rate;
            let scale = 1.0 / keep;
            Tensor::from_fn(x.shape(), |_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            })
        } else {
            Tensor::full(x.shape(), 1.0)
        };
        let y = x.mul(&mask)?;
        self.mask = Some(mask);
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("dropout", x, &self.shape)?;
        Ok(x.clone())
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self
            .mask
            .take()
            .ok_or(SevenError::BackwardBeforeForward("dropout"))?;
        check_grad("dropout backward", grad_out, mask.shape())?;
        grad_out.mul(&mask)
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
    fn zero_rate_and_eval_are_identity() {
        let mut r = rng::seeded(0);
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 + 0.5);
        let mut d0 = Dropout::new(0.0, &[4]);
        assert_eq!(d0.forward(&x, Mode::Train, &mut r).unwrap(), x);
        assert_eq!(d0.forward(&x, Mode::Eval, &mut r).unwrap(), x);
        let mut d = Dropout::new(0.9, &[4]);
        assert_eq!(d.forward(&x, Mode::Eval, &mut r).unwrap(), x);
        assert_eq!(d.infer(&x).unwrap(), x);
    }

    #[test]
    fn survivor_fraction_concentrates() {
        // 10^6 Bernoulli(0.5) draws: std of the fraction is 5e-4, so the
        // +-0.002 band is four standard deviations.
        let mut r = rng::seeded(42);
        let n = 1_000_000;
        let x = Tensor::full(&[1, n], 1.0);
        let mut d = Dropout::new(0.5, &[n]);
        let y = d.forward(&x, Mode::Train, &mut r).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((0.498..=0.502).contains(&survivors), "{survivors}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let g = d.backward(&x).unwrap();
        assert_eq!(g, y);
    }
}
