use super::{check_grad, check_input, Buffer, Layer, LayerSpec, Mode, Param};
use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Running statistics follow `r <- momentum * r + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Added to the variance before the square root.
pub const BN_EPSILON: f64 = 1e-5;

struct Cache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization for `[b, c]` or `[b, c, h, w]` inputs.
pub struct BatchNorm {
    shape: Vec<usize>,
    gain: Param,
    shift: Param,
    running_mean: Buffer,
    running_var: Buffer,
    cache: Option<Cache>,
}

impl Clone for BatchNorm {
    fn clone(&self) -> Self {
        BatchNorm {
            shape: self.shape.clone(),
            gain: self.gain.clone(),
            shift: self.shift.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            cache: None,
        }
    }
}

impl BatchNorm {
    pub fn new(shape: &[usize]) -> Result<Self> {
        if shape.len() != 1 && shape.len() != 3 {
            return Err(SevenError::invalid(format!(
                "batch norm needs [c] or [c, h, w] input, got {shape:?}"
            )));
        }
        let c = shape[0];
        Ok(BatchNorm {
            shape: shape.to_vec(),
            gain: Param::new("gain", Tensor::full(&[c], 1.0), false),
            shift: Param::new("shift", Tensor::zeros(&[c]), false),
            running_mean: Buffer {
                name: "running_mean",
                value: Tensor::zeros(&[c]),
            },
            running_var: Buffer {
                name: "running_var",
                value: Tensor::full(&[c], 1.0),
            },
            cache: None,
        })
    }

    pub fn set_affine(&mut self, gain: Tensor, shift: Tensor) -> Result<()> {
        check_grad("batch norm gain", &gain, self.gain.value.shape())?;
        check_grad("batch norm shift", &shift, self.shift.value.shape())?;
        self.gain.value = gain;
        self.shift.value = shift;
        Ok(())
    }

    pub fn running_stats(&self) -> (&Tensor, &Tensor) {
        (&self.running_mean.value, &self.running_var.value)
    }

    fn channels(&self) -> usize {
        self.shape[0]
    }

    fn spatial(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Calls `f(channel, flat_range)` for every contiguous run of one channel.
    fn for_each_run(&self, batch: usize, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
        let (c, s) = (self.channels(), self.spatial());
        for i in 0..batch {
            for ch in 0..c {
                let start = (i * c + ch) * s;
                f(ch, start..start + s);
            }
        }
    }

    fn normalize_with(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let (gain, shift) = (self.gain.value.data(), self.shift.value.data());
        let xs = x.data();
        {
            let ns = normalized.data_mut();
            let ys = out.data_mut();
            self.for_each_run(x.batch(), |ch, r| {
                for k in r {
                    let n = (xs[k] - mean[ch]) * inv_std[ch];
                    ns[k] = n;
                    ys[k] = gain[ch] * n + shift[ch];
                }
            });
        }
        (normalized, out)
    }
}

impl Layer for BatchNorm {
    fn spec(&self) -> LayerSpec {
        LayerSpec::BatchNorm
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        check_input("batch norm", x, &self.shape)?;
        let b = x.batch();
        if b < 2 {
            return Err(SevenError::invalid(
                "batch norm in train mode needs a batch of at least 2",
            ));
        }
        let c = self.channels();
        let count = (b * self.spatial()) as f64;
        let xs = x.data();
        let mut mean = vec![0.0; c];
        self.for_each_run(b, |ch, r| mean[ch] += xs[r].iter().sum::<f64>());
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        self.for_each_run(b, |ch, r| {
            var[ch] += xs[r].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>()
        });
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

        let (normalized, out) = self.normalize_with(x, &mean, &inv_std);

        let unbiased = count / (count - 1.0);
        for ch in 0..c {
            let rm = &mut self.running_mean.value.data_mut()[ch];
            *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean[ch];
            let rv = &mut self.running_var.value.data_mut()[ch];
            *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var[ch] * unbiased;
        }
        self.cache = Some(Cache {
            normalized,
            inv_std,
        });
        Ok(out)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input("batch norm", x, &self.shape)?;
        let inv_std: Vec<f64> = self
            .running_var
            .value
            .data()
            .iter()
            .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
            .collect();
        Ok(self
            .normalize_with(x, self.running_mean.value.data(), &inv_std)
            .1)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let Cache {
            normalized,
            inv_std,
        } = self
            .cache
            .take()
            .ok_or(SevenError::BackwardBeforeForward("batch norm"))?;
        check_grad("batch norm backward", grad_out, normalized.shape())?;
        let b = normalized.batch();
        let c = self.channels();
        let count = (b * self.spatial()) as f64;
        let (gs, ns) = (grad_out.data(), normalized.data());

        let mut sum_g = vec![0.0; c];
        let mut sum_gn = vec![0.0; c];
        self.for_each_run(b, |ch, r| {
            for k in r {
                sum_g[ch] += gs[k];
                sum_gn[ch] += gs[k] * ns[k];
            }
        });
        for ch in 0..c {
            self.gain.grad.data_mut()[ch] += sum_gn[ch];
            self.shift.grad.data_mut()[ch] += sum_g[ch];
        }

        let gain = self.gain.value.data().to_vec();
        let mut grad_in = Tensor::zeros(normalized.shape());
        {
            let gi = grad_in.data_mut();
            self.for_each_run(b, |ch, r| {
                let scale = gain[ch] * inv_std[ch] / count;
                for k in r {
                    gi[k] = scale * (count * gs[k] - sum_g[ch] - ns[k] * sum_gn[ch]);
                }
            });
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.shift]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.shift]
    }

    fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    fn boxed_clone(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn channel_stats(y: &Tensor, ch: usize) -> (f64, f64) {
        let (b, c, h, w) = y.dims4().unwrap();
        let vals: Vec<f64> = (0..b)
            .flat_map(|i| {
                let start = (i * c + ch) * h * w;
                y.data()[start..start + h * w].to_vec()
            })
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn train_output_has_shift_mean_and_gain_std() {
        let mut r = rng::seeded(11);
        let mut bn = BatchNorm::new(&[2, 3, 3]).unwrap();
        bn.set_affine(Tensor::vector(&[1.5, 0.7]), Tensor::vector(&[-0.3, 2.0]))
            .unwrap();
        // Large spread keeps the epsilon's effect on the std below 1e-6.
        let x = Tensor::from_fn(&[4, 2, 3, 3], |_| r.random_range(-300.0..300.0));
        let y = bn.forward(&x, Mode::Train, &mut r).unwrap();
        for (ch, (g, s)) in [(1.5, -0.3), (0.7, 2.0)].into_iter().enumerate() {
            let (mean, std) = channel_stats(&y, ch);
            assert!((mean - s).abs() < 1e-6, "mean {mean}");
            assert!((std - g).abs() < 1e-6, "std {std}");
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut r = rng::seeded(0);
        let mut bn = BatchNorm::new(&[1]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let y = bn.forward(&x, Mode::Train, &mut r).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_sample_train_batch_is_rejected() {
        let mut r = rng::seeded(0);
        let mut bn = BatchNorm::new(&[3]).unwrap();
        assert!(bn.forward(&Tensor::zeros(&[1, 3]), Mode::Train, &mut r).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 3]), Mode::Eval, &mut r).is_ok());
    }

    #[test]
    fn running_stats_move_toward_batch_and_stay_positive() {
        let mut r = rng::seeded(0);
        let mut bn = BatchNorm::new(&[1]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![4.0, 4.0]).unwrap();
        bn.forward(&x, Mode::Train, &mut r).unwrap();
        let (mean, var) = bn.running_stats();
        assert!((mean.data()[0] - 0.4).abs() < 1e-15);
        assert!((var.data()[0] - 0.9).abs() < 1e-15);
        assert!(var.data()[0] > 0.0);
        let y1 = bn.infer(&x).unwrap();
        let y2 = bn.infer(&x).unwrap();
        assert_eq!(y1, y2);
    }
}
