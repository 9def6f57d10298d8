//! Stride-1 convolution and its adjoint with "same" zero padding.
//!
//! Both kernels lower to GEMM through an im2col buffer of shape
//! `[channels * kh * kw, h * w]`. With `pad_before = (k - 1) / 2` (the extra
//! row/column of an even kernel goes after), the output extent equals the
//! input extent, and [`ConvTranspose2d`] is exactly the input-gradient map of
//! [`Conv2d`] for the same weights.

use super::{check_grad, check_input, glorot_uniform, with_batch, Layer, LayerSpec, Mode, Param};
use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::{gemm, MatRef, Tensor};

/// Zero padding placed before the first row/column for a kernel extent.
pub fn same_padding(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Spatial geometry shared by the im2col/col2im pair.
#[derive(Clone, Copy, Debug)]
struct Patch {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// For kernel offset `k` with padding `pad`, the output range whose input
    /// coordinate `o + k - pad` lands inside `0..extent`.
    fn valid(o_extent: usize, k: usize, pad: usize) -> (usize, usize, isize) {
        let shift = k as isize - pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (o_extent as isize - shift).clamp(0, o_extent as isize) as usize;
        (lo.min(hi), hi, shift)
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let (pt, pl) = (same_padding(self.kh), same_padding(self.kw));
        let hw = self.pixels();
        for c in 0..self.channels {
            let plane = &img[c * hw..(c + 1) * hw];
            for ki in 0..self.kh {
                let (ylo, yhi, dy) = Self::valid(h, ki, pt);
                for kj in 0..self.kw {
                    let (xlo, xhi, dx) = Self::valid(w, kj, pl);
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    dst.fill(0.0);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy as isize + dy) as usize;
                        let src_start = (iy * w) as isize + xlo as isize + dx;
                        let src = &plane[src_start as usize..src_start as usize + (xhi - xlo)];
                        dst[oy * w + xlo..oy * w + xhi].copy_from_slice(src);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patch::im2col`]: scatters-adds columns back into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let (pt, pl) = (same_padding(self.kh), same_padding(self.kw));
        let hw = self.pixels();
        for c in 0..self.channels {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for ki in 0..self.kh {
                let (ylo, yhi, dy) = Self::valid(h, ki, pt);
                for kj in 0..self.kw {
                    let (xlo, xhi, dx) = Self::valid(w, kj, pl);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in ylo..yhi {
                        let iy = (oy as isize + dy) as usize;
                        let dst_start = ((iy * w) as isize + xlo as isize + dx) as usize;
                        let dst = &mut plane[dst_start..dst_start + (xhi - xlo)];
                        for (d, s) in dst.iter_mut().zip(&src[oy * w + xlo..oy * w + xhi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], hw: usize) {
    for (plane, &b) in out.chunks_exact_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_sums(grad: &[f64], acc: &mut [f64], hw: usize) {
    for (plane, a) in grad.chunks_exact(hw).zip(acc.iter_mut()) {
        *a += plane.iter().sum::<f64>();
    }
}

/// Cross-correlation `[b, c_in, h, w] -> [b, c_out, h, w]`.
#[derive(Clone)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    out_shape: Vec<usize>,
    /// `[c_out, c_in, kh, kw]`
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        (h, w): (usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let (kh, kw) = kernel;
        let weight = glorot_uniform(
            &[out_channels, in_channels, kh, kw],
            in_channels * kh * kw,
            out_channels * kh * kw,
            rng,
        );
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            out_shape: vec![out_channels, h, w],
            weight: Param::new("weight", weight, true),
            bias: Param::new("bias", Tensor::zeros(&[out_channels]), false),
            input: None,
        }
    }

    /// Replaces the weights, e.g. with a hand-built kernel in tests.
    pub fn set_weights(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        check_grad("conv weight", &weight, self.weight.value.shape())?;
        check_grad("conv bias", &bias, self.bias.value.shape())?;
        self.weight.value = weight;
        self.bias.value = bias;
        Ok(())
    }

    fn patch(&self, channels: usize) -> Patch {
        Patch {
            channels,
            h: self.out_shape[1],
            w: self.out_shape[2],
            kh: self.kernel.0,
            kw: self.kernel.1,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(SevenError::ShapeMismatch {
                op: "conv channels",
                left: x.shape().to_vec(),
                right: self.weight.value.shape().to_vec(),
            });
        }
        check_input("conv", x, &[self.in_channels, self.out_shape[1], self.out_shape[2]])
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let b = x.batch();
        let patch = self.patch(self.in_channels);
        let (k, hw) = (patch.rows(), patch.pixels());
        let mut cols = vec![0.0; k * hw];
        let mut out = Tensor::zeros(&with_batch(b, &self.out_shape));
        let w = MatRef::row_major(self.weight.value.data(), self.out_channels, k);
        for i in 0..b {
            patch.im2col(x.row(i), &mut cols);
            let y = out.row_mut(i);
            gemm(1.0, w, MatRef::row_major(&cols, k, hw), 0.0, y);
            add_channel_bias(y, self.bias.value.data(), hw);
        }
        Ok(out)
    }
}

impl Layer for Conv2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv {
            kernel: self.kernel,
            out_channels: self.out_channels,
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
        let x = self.input.take().ok_or(SevenError::BackwardBeforeForward("conv"))?;
        let b = x.batch();
        check_grad("conv backward", grad_out, &with_batch(b, &self.out_shape))?;
        let patch = self.patch(self.in_channels);
        let (k, hw) = (patch.rows(), patch.pixels());
        let mut cols = vec![0.0; k * hw];
        let mut dcols = vec![0.0; k * hw];
        let mut grad_in = Tensor::zeros(x.shape());
        let w = MatRef::row_major(self.weight.value.data(), self.out_channels, k);
        for i in 0..b {
            let g = MatRef::row_major(grad_out.row(i), self.out_channels, hw);
            patch.im2col(x.row(i), &mut cols);
            gemm(
                1.0,
                g,
                MatRef::row_major(&cols, k, hw).t(),
                1.0,
                self.weight.grad.data_mut(),
            );
            accumulate_channel_sums(grad_out.row(i), self.bias.grad.data_mut(), hw);
            gemm(1.0, w.t(), g, 0.0, &mut dcols);
            patch.col2im(&dcols, grad_in.row_mut(i));
        }
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

/// Transposed convolution `[b, c_in, h, w] -> [b, c_out, h, w]`: the adjoint
/// of a same-padded [`Conv2d`] mapping `c_out -> c_in` with the same weights.
#[derive(Clone)]
pub struct ConvTranspose2d {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    out_shape: Vec<usize>,
    /// `[c_in, c_out, kh, kw]`
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        (h, w): (usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let (kh, kw) = kernel;
        let weight = glorot_uniform(
            &[in_channels, out_channels, kh, kw],
            in_channels * kh * kw,
            out_channels * kh * kw,
            rng,
        );
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            out_shape: vec![out_channels, h, w],
            weight: Param::new("weight", weight, true),
            bias: Param::new("bias", Tensor::zeros(&[out_channels]), false),
            input: None,
        }
    }

    pub fn set_weights(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        check_grad("transconv weight", &weight, self.weight.value.shape())?;
        check_grad("transconv bias", &bias, self.bias.value.shape())?;
        self.weight.value = weight;
        self.bias.value = bias;
        Ok(())
    }

    fn patch(&self) -> Patch {
        Patch {
            channels: self.out_channels,
            h: self.out_shape[1],
            w: self.out_shape[2],
            kh: self.kernel.0,
            kw: self.kernel.1,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(SevenError::ShapeMismatch {
                op: "transconv channels",
                left: x.shape().to_vec(),
                right: self.weight.value.shape().to_vec(),
            });
        }
        check_input(
            "transconv",
            x,
            &[self.in_channels, self.out_shape[1], self.out_shape[2]],
        )
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let b = x.batch();
        let patch = self.patch();
        let (k, hw) = (patch.rows(), patch.pixels());
        let mut cols = vec![0.0; k * hw];
        let mut out = Tensor::zeros(&with_batch(b, &self.out_shape));
        let w = MatRef::row_major(self.weight.value.data(), self.in_channels, k);
        for i in 0..b {
            let xi = MatRef::row_major(x.row(i), self.in_channels, hw);
            gemm(1.0, w.t(), xi, 0.0, &mut cols);
            let y = out.row_mut(i);
            patch.col2im(&cols, y);
            add_channel_bias(y, self.bias.value.data(), hw);
        }
        Ok(out)
    }
}

impl Layer for ConvTranspose2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::TransConv {
            kernel: self.kernel,
            out_channels: self.out_channels,
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
        let x = self
            .input
            .take()
            .ok_or(SevenError::BackwardBeforeForward("transconv"))?;
        let b = x.batch();
        check_grad("transconv backward", grad_out, &with_batch(b, &self.out_shape))?;
        let patch = self.patch();
        let (k, hw) = (patch.rows(), patch.pixels());
        let mut cols = vec![0.0; k * hw];
        let mut grad_in = Tensor::zeros(x.shape());
        let w = MatRef::row_major(self.weight.value.data(), self.in_channels, k);
        for i in 0..b {
            patch.im2col(grad_out.row(i), &mut cols);
            let c = MatRef::row_major(&cols, k, hw);
            gemm(
                1.0,
                MatRef::row_major(x.row(i), self.in_channels, hw),
                c.t(),
                1.0,
                self.weight.grad.data_mut(),
            );
            accumulate_channel_sums(grad_out.row(i), self.bias.grad.data_mut(), hw);
            gemm(1.0, w, c, 0.0, grad_in.row_mut(i));
        }
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
