use crate::error::{Result, SevenError};
use crate::layers::{build_layer, Buffer, Layer, LayerSpec, Mode, Param};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A chain of layers applied in order.
#[derive(Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Box<dyn Layer>>,
}

impl Network {
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = build_layer(spec, &shape, rng).map_err(|e| {
                SevenError::invalid(format!("layer {i} ({spec:?}) on input {shape:?}: {e}"))
            })?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map_or(&self.input_shape, |l| l.output_shape())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().get(1..) != Some(self.input_shape.as_slice()) {
            let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(SevenError::ShapeMismatch {
                op: "network input",
                left: x.shape().to_vec(),
                right: expected,
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode, rng)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Parameters named `"{prefix}.{layer}.{param}"`, in layer order.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |p| (format!("{prefix}.{i}.{}", p.name), p))
            })
            .collect()
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |p| (format!("{prefix}.{i}.{}", p.name), p))
            })
            .collect()
    }

    pub fn named_buffers(&self, prefix: &str) -> Vec<(String, &Buffer)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.buffers()
                    .into_iter()
                    .map(move |b| (format!("{prefix}.{i}.{}", b.name), b))
            })
            .collect()
    }

    pub fn named_buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Buffer)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.buffers_mut()
                    .into_iter()
                    .map(move |b| (format!("{prefix}.{i}.{}", b.name), b))
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.zero_grad();
            }
        }
    }
}
