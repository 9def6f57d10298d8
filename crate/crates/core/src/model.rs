//! The twin encoder/decoder model and its joint objective.
//!
//! Both branches of a pair go through the same [`Network`] in one pass: the
//! inputs are stacked along the batch axis as `[x1; x2]`, so the two
//! branches read and write a single parameter store.

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Result, SevenError};
use crate::layers::{Buffer, Mode, Param};
use crate::loss::{self, Relation};
use crate::network::Network;
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// How parameter magnitude enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegNorm {
    /// `sum(theta^2)` over regularized parameters.
    #[default]
    Squared,
    /// `||theta_e|| + ||theta_d||`, each an un-squared l2 norm.
    Plain,
}

/// Which terms of the objective are active, and their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub reg_norm: RegNorm,
    /// Include the pair cross-entropy on labeled pairs.
    pub discriminative: bool,
    /// Run the decoder and include the reconstruction term. When off, the
    /// decoder is skipped and its parameters are not regularized.
    pub generative: bool,
}

impl LossConfig {
    pub fn joint(alpha: f64, beta: f64) -> Self {
        LossConfig {
            alpha,
            beta,
            reg_norm: RegNorm::Squared,
            discriminative: true,
            generative: true,
        }
    }
}

/// A batch of pairs. `labels[i]` is `None` for an unlabeled pair.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub labels: Vec<Option<Relation>>,
}

impl PairBatch {
    pub fn new(x1: Tensor, x2: Tensor, labels: Vec<Option<Relation>>) -> Result<Self> {
        if x1.shape() != x2.shape() {
            return Err(SevenError::ShapeMismatch {
                op: "pair batch",
                left: x1.shape().to_vec(),
                right: x2.shape().to_vec(),
            });
        }
        if labels.len() != x1.batch() {
            return Err(SevenError::invalid(format!(
                "{} labels for a batch of {}",
                labels.len(),
                x1.batch()
            )));
        }
        Ok(PairBatch { x1, x2, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Batch-mean loss terms. `total = discriminative + alpha * generative +
/// beta * regularization`, all terms unweighted.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Mean cross-entropy over the labeled pairs of the batch (0 if none).
    pub discriminative: f64,
    /// Mean over pairs of the two branches' reconstruction norms.
    pub generative: f64,
    pub regularization: f64,
    pub distances: Vec<f64>,
    pub labeled: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.discriminative.is_finite()
            && self.generative.is_finite()
            && self.regularization.is_finite()
    }
}

#[derive(Clone)]
pub struct SevenModel {
    arch: ArchSpec,
    encoder: Network,
    decoder: Network,
}

impl SevenModel {
    /// Builds and initializes a model; weights are drawn from the `Init`
    /// stream of `seed`.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let encoder = Network::build(&arch.encoder, &arch.input, &mut rng)?;
        let decoder = Network::build(&arch.decoder, encoder.output_shape(), &mut rng)?;
        Ok(SevenModel {
            arch,
            encoder,
            decoder,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Network {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Network {
        &mut self.decoder
    }

    pub fn embedding_width(&self) -> usize {
        self.encoder.output_shape()[0]
    }

    /// Evaluation-mode embedding of a `[b, c, h, w]` batch.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.infer(x)
    }

    /// Evaluation-mode embeddings of both branches from one stacked pass.
    pub fn embed_pair(&self, x1: &Tensor, x2: &Tensor) -> Result<(Tensor, Tensor)> {
        if x1.shape() != x2.shape() {
            return Err(SevenError::ShapeMismatch {
                op: "embed pair",
                left: x1.shape().to_vec(),
                right: x2.shape().to_vec(),
            });
        }
        let b = x1.batch();
        let e = self.encoder.infer(&Tensor::concat_batch(&[x1, x2])?)?;
        Ok((e.slice_batch(0, b)?, e.slice_batch(b, 2 * b)?))
    }

    pub fn pair_distances(&self, x1: &Tensor, x2: &Tensor) -> Result<Vec<f64>> {
        let (e1, e2) = self.embed_pair(x1, x2)?;
        loss::distances(&e1, &e2)
    }

    /// Evaluation-mode reconstruction `g(f(x))`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decoder.infer(&self.encoder.infer(x)?)
    }

    /// `Pos` where the embedding distance is at most `tau`.
    pub fn verify(&self, x1: &Tensor, x2: &Tensor, tau: f64) -> Result<Vec<Relation>> {
        Ok(self
            .pair_distances(x1, x2)?
            .into_iter()
            .map(|d| decide(d, tau))
            .collect())
    }

    /// Training-mode loss without touching gradients. Batch-norm running
    /// statistics still advance, as in any training forward.
    pub fn total_loss(&mut self, batch: &PairBatch, cfg: &LossConfig, rng: &mut Rng) -> Result<LossReport> {
        self.run(batch, cfg, rng, Mode::Train, false)
    }

    /// Inference-mode loss: dropout off, batch norm on running statistics.
    /// This is the deterministic objective at the current parameters.
    pub fn eval_loss(&mut self, batch: &PairBatch, cfg: &LossConfig) -> Result<LossReport> {
        self.run(batch, cfg, &mut rng::seeded(0), Mode::Eval, false)
    }

    /// Training-mode forward and backward; parameter gradients are
    /// accumulated (not overwritten).
    pub fn forward_backward(
        &mut self,
        batch: &PairBatch,
        cfg: &LossConfig,
        rng: &mut Rng,
    ) -> Result<LossReport> {
        self.run(batch, cfg, rng, Mode::Train, true)
    }

    fn run(
        &mut self,
        batch: &PairBatch,
        cfg: &LossConfig,
        rng: &mut Rng,
        mode: Mode,
        backward: bool,
    ) -> Result<LossReport> {
        let b = batch.len();
        if b == 0 {
            return Err(SevenError::invalid("empty pair batch"));
        }
        let x = Tensor::concat_batch(&[&batch.x1, &batch.x2])?;
        let e = self.encoder.forward(&x, mode, rng)?;
        let e1 = e.slice_batch(0, b)?;
        let e2 = e.slice_batch(b, 2 * b)?;
        let distances = loss::distances(&e1, &e2)?;

        let labeled = batch.labeled();
        let mut discriminative = 0.0;
        let mut grad_e = Tensor::zeros(e.shape());
        if cfg.discriminative && labeled > 0 {
            let n = labeled as f64;
            discriminative = loss::discriminative_loss(&distances, &batch.labels)? / n;
            if backward {
                let k = e.row_len();
                let g = grad_e.data_mut();
                for (i, (&d, label)) in distances.iter().zip(&batch.labels).enumerate() {
                    let Some(rel) = label else { continue };
                    if d == 0.0 {
                        // Subgradient 0 at coincident embeddings.
                        continue;
                    }
                    let coef = loss::pair_cross_entropy_grad(d, *rel) / (n * d);
                    for j in 0..k {
                        let diff = e1.row(i)[j] - e2.row(i)[j];
                        g[i * k + j] += coef * diff;
                        g[(b + i) * k + j] -= coef * diff;
                    }
                }
            }
        }

        let mut generative = 0.0;
        if cfg.generative {
            let x_hat = self.decoder.forward(&e, mode, rng)?;
            generative = loss::reconstruction_norms(&x, &x_hat)?.iter().sum::<f64>() / b as f64;
            if backward {
                let g_hat = loss::reconstruction_grad(&x, &x_hat, cfg.alpha / b as f64)?;
                let g_dec = self.decoder.backward(&g_hat)?;
                for (a, v) in grad_e.data_mut().iter_mut().zip(g_dec.data()) {
                    *a += v;
                }
            }
        }

        if backward {
            self.encoder.backward(&grad_e)?;
        }

        let regularization = self.regularize(cfg, backward);
        Ok(LossReport {
            total: discriminative + cfg.alpha * generative + cfg.beta * regularization,
            discriminative,
            generative,
            regularization,
            distances,
            labeled,
        })
    }

    /// Regularization value over decaying parameters; adds its weighted
    /// gradient when `backward` is set.
    fn regularize(&mut self, cfg: &LossConfig, backward: bool) -> f64 {
        let mut nets = vec![&mut self.encoder];
        if cfg.generative {
            nets.push(&mut self.decoder);
        }
        let mut total = 0.0;
        for net in nets {
            let mut params: Vec<&mut Param> = net
                .layers_mut()
                .iter_mut()
                .flat_map(|l| l.params_mut())
                .filter(|p| p.decay)
                .collect();
            let squares: f64 = params.iter().map(|p| p.value.sum_squares()).sum();
            match cfg.reg_norm {
                RegNorm::Squared => {
                    total += squares;
                    if backward && cfg.beta != 0.0 {
                        for p in &mut params {
                            axpy(&mut p.grad, 2.0 * cfg.beta, &p.value);
                        }
                    }
                }
                RegNorm::Plain => {
                    let norm = squares.sqrt();
                    total += norm;
                    if backward && cfg.beta != 0.0 && norm > 0.0 {
                        for p in &mut params {
                            axpy(&mut p.grad, cfg.beta / norm, &p.value);
                        }
                    }
                }
            }
        }
        total
    }

    /// All parameters, encoder first, named `encoder.{layer}.{param}` and
    /// `decoder.{layer}.{param}`.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = self.encoder.named_params("encoder");
        out.extend(self.decoder.named_params("decoder"));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.encoder.named_params_mut("encoder");
        out.extend(self.decoder.named_params_mut("decoder"));
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Buffer)> {
        let mut out = self.encoder.named_buffers("encoder");
        out.extend(self.decoder.named_buffers("decoder"));
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Buffer)> {
        let mut out = self.encoder.named_buffers_mut("encoder");
        out.extend(self.decoder.named_buffers_mut("decoder"));
        out
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        self.decoder.zero_grads();
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

impl std::fmt::Debug for SevenModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SevenModel")
            .field("preset", &self.arch.preset)
            .field("input", &self.arch.input)
            .field("params", &self.param_count())
            .finish()
    }
}

/// Decision rule: positive iff `d <= tau`.
pub fn decide(d: f64, tau: f64) -> Relation {
    if d <= tau {
        Relation::Pos
    } else {
        Relation::Neg
    }
}

fn axpy(y: &mut Tensor, a: f64, x: &Tensor) {
    for (yv, xv) in y.data_mut().iter_mut().zip(x.data()) {
        *yv += a * xv;
    }
}
