//! Finite-difference gradient checks shared by the integration targets.
#![allow(dead_code)]

use rand::Rng as _;
use seven_core::arch::ArchSpec;
use seven_core::layers::{build_layer, ConvTranspose2d, Conv2d, Layer, LayerSpec, Mode};
use seven_core::loss::Relation;
use seven_core::model::{LossConfig, PairBatch, SevenModel};
use seven_core::rng::{self, Rng};
use seven_core::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `||a - n|| / max(||a||, ||n||, 1e-6)`. The floor sits well above the
/// central-difference roundoff (1e-11 to 1e-10 at this step) so gradients that
/// are exactly zero, such as a bias feeding batch norm, compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-6)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Inputs bounded away from zero, so ReLU kinks sit far from the probe step.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Worst per-tensor relative error for one layer under `L = sum(w * y)`,
/// covering the input gradient and every parameter gradient.
pub fn check_layer(spec: &LayerSpec, input: &[usize], batch: usize, seed: u64) -> (String, f64) {
    let mut r = rng::seeded(seed);
    let layer = build_layer(spec, input, &mut r).expect("layer builds");
    // Randomize every parameter so gains/biases are not at their identity init.
    let mut layer = layer;
    for p in layer.params_mut() {
        for v in p.value.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(input);
    let x = away_from_zero(&shape, &mut r);
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(layer.output_shape());
    let w = Tensor::from_fn(&out_shape, |_| r.random_range(-1.0..1.0));
    let mask_seed = seed.wrapping_add(1000);

    let objective = |l: &dyn Layer, x: &Tensor| -> f64 {
        let mut l = l.boxed_clone();
        let y = l.forward(x, Mode::Train, &mut rng::seeded(mask_seed)).unwrap();
        y.dot(&w).unwrap()
    };

    let mut analytic = layer.boxed_clone();
    analytic.forward(&x, Mode::Train, &mut rng::seeded(mask_seed)).unwrap();
    let grad_x = analytic.backward(&w).unwrap();

    let mut worst = (String::from("input"), 0.0);
    let mut numeric = vec![0.0; x.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        *n = (objective(layer.as_ref(), &xp) - objective(layer.as_ref(), &xm)) / (2.0 * FD_STEP);
    }
    worst.1 = relative_error(grad_x.data(), &numeric);

    let grads: Vec<(&'static str, Tensor)> = analytic.params().iter().map(|p| (p.name, p.grad.clone())).collect();
    for (k, (name, grad)) in grads.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = layer.boxed_clone();
            plus.params_mut()[k].value.data_mut()[i] += FD_STEP;
            let mut minus = layer.boxed_clone();
            minus.params_mut()[k].value.data_mut()[i] -= FD_STEP;
            *n = (objective(plus.as_ref(), &x) - objective(minus.as_ref(), &x)) / (2.0 * FD_STEP);
        }
        let e = relative_error(grad.data(), &numeric);
        if e > worst.1 {
            worst = (name.to_string(), e);
        }
    }
    worst
}

/// Every layer kind, each on a small input it accepts.
pub fn layer_cases() -> Vec<(LayerSpec, Vec<usize>, usize)> {
    vec![
        (
            LayerSpec::Conv {
                kernel: (3, 3),
                out_channels: 3,
            },
            vec![2, 5, 4],
            2,
        ),
        (
            LayerSpec::Conv {
                kernel: (2, 2),
                out_channels: 2,
            },
            vec![1, 4, 4],
            2,
        ),
        (
            LayerSpec::TransConv {
                kernel: (3, 3),
                out_channels: 2,
            },
            vec![3, 4, 5],
            2,
        ),
        (
            LayerSpec::TransConv {
                kernel: (2, 2),
                out_channels: 1,
            },
            vec![2, 3, 3],
            2,
        ),
        (LayerSpec::MaxPool { factor: (2, 2) }, vec![2, 5, 4], 2),
        (
            LayerSpec::Upsample {
                factor: (2, 2),
                target: Some((5, 4)),
            },
            vec![2, 2, 2],
            2,
        ),
        (LayerSpec::Dense { out_units: 5 }, vec![7], 3),
        (LayerSpec::Relu, vec![2, 3, 3], 2),
        (LayerSpec::Sigmoid, vec![6], 3),
        (LayerSpec::Tanh, vec![6], 3),
        (LayerSpec::BatchNorm, vec![2, 3, 3], 3),
        (LayerSpec::BatchNorm, vec![5], 4),
        (LayerSpec::Dropout { rate: 0.3 }, vec![2, 3, 3], 2),
        (LayerSpec::Reshape { shape: vec![3, 6] }, vec![2, 3, 3], 2),
        (LayerSpec::Flatten, vec![2, 3, 3], 2),
    ]
}

pub fn random_batch(labels: Vec<Option<Relation>>, shape: &[usize], seed: u64) -> PairBatch {
    let mut r = rng::seeded(seed);
    let mut full = vec![labels.len()];
    full.extend_from_slice(shape);
    let x1 = Tensor::from_fn(&full, |_| r.random::<f64>());
    let x2 = Tensor::from_fn(&full, |_| r.random::<f64>());
    PairBatch::new(x1, x2, labels).unwrap()
}

/// Relative error of `d total / d theta` for the tiny preset on `batch`,
/// over the whole parameter vector, plus the tensor with the largest
/// absolute deviation. A per-tensor ratio is meaningless for the conv bias
/// feeding batch norm: its true gradient is zero, so only roundoff is left.
pub fn check_model(seed: u64, batch: &PairBatch, cfg: &LossConfig) -> (String, f64) {
    let model = SevenModel::new(ArchSpec::tiny(), seed).unwrap();
    let loss = |m: &SevenModel| -> f64 {
        let mut m = m.clone();
        m.total_loss(batch, cfg, &mut rng::seeded(0)).unwrap().total
    };
    let mut analytic = model.clone();
    analytic.forward_backward(batch, cfg, &mut rng::seeded(0)).unwrap();
    let grads: Vec<(String, Tensor)> = analytic
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();

    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut worst = (String::new(), -1.0);
    for (k, (name, grad)) in grads.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.named_params_mut()[k].1.value.data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.named_params_mut()[k].1.value.data_mut()[i] -= FD_STEP;
            *n = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        }
        let gap = grad.data().iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        if gap > worst.1 {
            worst = (name.clone(), gap);
        }
        all_a.extend_from_slice(grad.data());
        all_n.extend(numeric);
    }
    (worst.0, relative_error(&all_a, &all_n))
}

pub fn labeled_only(b: usize) -> Vec<Option<Relation>> {
    (0..b)
        .map(|i| Some(if i % 2 == 0 { Relation::Pos } else { Relation::Neg }))
        .collect()
}

/// `<conv(x), y> - <x, transconv(y)>` with shared weights, relative to the
/// magnitude of either side.
pub fn adjoint_gap(c_in: usize, c_out: usize, kernel: (usize, usize), hw: (usize, usize), seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let mut conv = Conv2d::new(c_in, c_out, kernel, hw, &mut r);
    let mut trans = ConvTranspose2d::new(c_out, c_in, kernel, hw, &mut r);
    let weight = Tensor::from_fn(&[c_out, c_in, kernel.0, kernel.1], |_| r.random_range(-1.0..1.0));
    conv.set_weights(weight.clone(), Tensor::zeros(&[c_out])).unwrap();
    trans.set_weights(weight, Tensor::zeros(&[c_in])).unwrap();
    let x = Tensor::from_fn(&[2, c_in, hw.0, hw.1], |_| r.random_range(-1.0..1.0));
    let y = Tensor::from_fn(&[2, c_out, hw.0, hw.1], |_| r.random_range(-1.0..1.0));
    let lhs = conv.infer(&x).unwrap().dot(&y).unwrap();
    let rhs = x.dot(&trans.infer(&y).unwrap()).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}
