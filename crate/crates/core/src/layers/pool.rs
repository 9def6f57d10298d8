use super::{check_grad, check_input, with_batch, Layer, LayerSpec, Mode};
use crate::error::{Result, SevenError};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Non-overlapping max pooling. Trailing rows/columns that do not fill a
/// window are discarded (floor division).
#[derive(Clone)]
pub struct MaxPool2d {
    factor: (usize, usize),
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Flat input index of each output's argmax, from the last training forward.
    argmax: Option<Vec<usize>>,
}

impl MaxPool2d {
    pub fn new(channels: usize, (h, w): (usize, usize), factor: (usize, usize)) -> Result<Self> {
        let (oh, ow) = (h / factor.0, w / factor.1);
        if oh == 0 || ow == 0 {
            return Err(SevenError::invalid(format!(
                "pool factor {factor:?} larger than input {h}x{w}"
            )));
        }
        Ok(MaxPool2d {
            factor,
            in_shape: vec![channels, h, w],
            out_shape: vec![channels, oh, ow],
            argmax: None,
        })
    }

    fn compute(&self, x: &Tensor, mut argmax: Option<&mut Vec<usize>>) -> Result<Tensor> {
        check_input("maxpool", x, &self.in_shape)?;
        let (b, c, h, w) = x.dims4()?;
        let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
        let (fh, fw) = self.factor;
        let mut out = Tensor::zeros(&with_batch(b, &self.out_shape));
        let xs = x.data();
        let ys = out.data_mut();
        let mut o = 0;
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // Scan order within the window; strict `>` keeps the first maximum.
                    let mut best = base + oy * fh * w + ox * fw;
                    for dy in 0..fh {
                        let row = base + (oy * fh + dy) * w + ox * fw;
                        for idx in row..row + fw {
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    ys[o] = xs[best];
                    if let Some(a) = argmax.as_deref_mut() {
                        a[o] = best;
                    }
                    o += 1;
                }
            }
        }
        Ok(out)
    }
}

impl Layer for MaxPool2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::MaxPool {
            factor: self.factor,
        }
    }

    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let n = x.batch() * self.out_shape.iter().product::<usize>();
        let mut argmax = vec![0; n];
        let y = self.compute(x, Some(&mut argmax))?;
        self.argmax = Some(argmax);
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x, None)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let argmax = self
            .argmax
            .take()
            .ok_or(SevenError::BackwardBeforeForward("maxpool"))?;
        let b = argmax.len() / self.out_shape.iter().product::<usize>();
        check_grad("maxpool backward", grad_out, &with_batch(b, &self.out_shape))?;
        let mut grad_in = Tensor::zeros(&with_batch(b, &self.in_shape));
        let gi = grad_in.data_mut();
        for (&src, &g) in argmax.iter().zip(grad_out.data()) {
            gi[src] += g;
        }
        Ok(grad_in)
    }

    fn boxed_clone(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Nearest-neighbour upsampling by an integer factor. When a `target` extent
/// is given, output rows/columns past `factor * input` repeat the last source
/// row/column.
#[derive(Clone)]
pub struct Upsample2d {
    factor: (usize, usize),
    target: Option<(usize, usize)>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    batch: Option<usize>,
}

impl Upsample2d {
    pub fn new(
        channels: usize,
        (h, w): (usize, usize),
        factor: (usize, usize),
        target: Option<(usize, usize)>,
    ) -> Result<Self> {
        let (oh, ow) = target.unwrap_or((h * factor.0, w * factor.1));
        if oh < h * factor.0 || ow < w * factor.1 || oh >= (h + 1) * factor.0 || ow >= (w + 1) * factor.1
        {
            return Err(SevenError::invalid(format!(
                "upsample target {oh}x{ow} incompatible with {h}x{w} by {factor:?}"
            )));
        }
        Ok(Upsample2d {
            factor,
            target,
            in_shape: vec![channels, h, w],
            out_shape: vec![channels, oh, ow],
            batch: None,
        })
    }

    fn source(&self, o: usize, f: usize, extent: usize) -> usize {
        (o / f).min(extent - 1)
    }
}

impl Layer for Upsample2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Upsample {
            factor: self.factor,
            target: self.target,
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
        check_input("upsample", x, &self.in_shape)?;
        let (b, c, h, w) = x.dims4()?;
        let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
        let mut out = Tensor::zeros(&with_batch(b, &self.out_shape));
        let xs = x.data();
        let ys = out.data_mut();
        for plane in 0..b * c {
            for oy in 0..oh {
                let sy = self.source(oy, self.factor.0, h);
                let src = &xs[(plane * h + sy) * w..(plane * h + sy + 1) * w];
                let dst = &mut ys[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[self.source(ox, self.factor.1, w)];
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let b = self
            .batch
            .take()
            .ok_or(SevenError::BackwardBeforeForward("upsample"))?;
        check_grad("upsample backward", grad_out, &with_batch(b, &self.out_shape))?;
        let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
        let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
        let mut grad_in = Tensor::zeros(&with_batch(b, &self.in_shape));
        let gs = grad_out.data();
        let gi = grad_in.data_mut();
        for plane in 0..b * c {
            for oy in 0..oh {
                let sy = self.source(oy, self.factor.0, h);
                for ox in 0..ow {
                    let sx = self.source(ox, self.factor.1, w);
                    gi[(plane * h + sy) * w + sx] += gs[(plane * oh + oy) * ow + ox];
                }
            }
        }
        Ok(grad_in)
    }

    fn boxed_clone(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}
