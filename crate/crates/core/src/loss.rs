//! Pair probability, discriminative and generative losses.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SevenError};
use crate::tensor::Tensor;

/// Probabilities are kept inside `[P_CLAMP, 1 - P_CLAMP]` on the side the
/// log needs: `p >= P_CLAMP` for positive pairs, `p <= 1 - P_CLAMP` for
/// negative pairs.
pub const P_CLAMP: f64 = 1e-7;
/// Added under the square root when differentiating a reconstruction norm.
pub const NORM_GUARD: f64 = 1e-8;

/// Relation between the two samples of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Pos,
    Neg,
}

/// Probability that a pair at embedding distance `d` is positive: `1 - tanh(d)`.
pub fn pair_probability(d: f64) -> Result<f64> {
    if d < 0.0 || d.is_nan() {
        return Err(SevenError::invalid(format!("distance must be >= 0, got {d}")));
    }
    Ok(1.0 - d.tanh())
}

/// The same map written as `2 / (1 + exp(2d))`.
pub fn pair_probability_logistic(d: f64) -> f64 {
    2.0 / (1.0 + (2.0 * d).exp())
}

fn clamped(p: f64, relation: Relation) -> f64 {
    match relation {
        Relation::Pos => p.max(P_CLAMP),
        Relation::Neg => p.min(1.0 - P_CLAMP),
    }
}

/// Cross-entropy of one labeled pair: `-log p` (pos) or `-log(1 - p)` (neg).
pub fn pair_cross_entropy(d: f64, relation: Relation) -> f64 {
    let p = clamped(1.0 - d.tanh(), relation);
    match relation {
        Relation::Pos => -p.ln(),
        Relation::Neg => -(1.0 - p).ln(),
    }
}

/// Derivative of [`pair_cross_entropy`] with respect to `d`. Zero where the
/// probability clamp is active.
pub fn pair_cross_entropy_grad(d: f64, relation: Relation) -> f64 {
    let t = d.tanh();
    let p = 1.0 - t;
    if clamped(p, relation) != p {
        return 0.0;
    }
    // dp/dd = -(1 - t^2)
    let dp = -(1.0 - t * t);
    match relation {
        Relation::Pos => -dp / p,
        Relation::Neg => dp / (1.0 - p),
    }
}

/// `KL(target || p)` between Bernoulli distributions, with `0 log 0 = 0`.
pub fn bernoulli_kl(target: f64, p: f64) -> f64 {
    // a (ln a - ln b) rather than a ln(a / b): the quotient rounds, which
    // costs relative accuracy when b is close to 1.
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a.ln() - b.ln()) };
    term(target, p) + term(1.0 - target, 1.0 - p)
}

/// KL form of the per-pair discriminative loss, using the clamped probability.
pub fn pair_kl(d: f64, relation: Relation) -> f64 {
    let target = match relation {
        Relation::Pos => 1.0,
        Relation::Neg => 0.0,
    };
    bernoulli_kl(target, clamped(1.0 - d.tanh(), relation))
}

/// Sum of the cross-entropy over labeled pairs; unlabeled pairs contribute nothing.
pub fn discriminative_loss(distances: &[f64], labels: &[Option<Relation>]) -> Result<f64> {
    if distances.len() != labels.len() {
        return Err(SevenError::invalid(format!(
            "{} distances but {} labels",
            distances.len(),
            labels.len()
        )));
    }
    Ok(distances
        .iter()
        .zip(labels)
        .filter_map(|(&d, l)| l.map(|r| pair_cross_entropy(d, r)))
        .sum())
}

/// Per-sample `||x_hat - x||_2` over the leading axis.
pub fn reconstruction_norms(x: &Tensor, x_hat: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(SevenError::ShapeMismatch {
            op: "reconstruction",
            left: x_hat.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    Ok((0..x.batch())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(x_hat.row(i))
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Sum over pairs of `||x1_hat - x1|| + ||x2_hat - x2||`.
pub fn generative_loss(x1: &Tensor, x2: &Tensor, x1_hat: &Tensor, x2_hat: &Tensor) -> Result<f64> {
    let a = reconstruction_norms(x1, x1_hat)?;
    let b = reconstruction_norms(x2, x2_hat)?;
    if a.len() != b.len() {
        return Err(SevenError::ShapeMismatch {
            op: "generative loss branches",
            left: x1.shape().to_vec(),
            right: x2.shape().to_vec(),
        });
    }
    Ok(a.iter().sum::<f64>() + b.iter().sum::<f64>())
}

/// Gradient of `scale * sum_i ||x_hat_i - x_i||` with respect to `x_hat`.
pub(crate) fn reconstruction_grad(x: &Tensor, x_hat: &Tensor, scale: f64) -> Result<Tensor> {
    let mut grad = x_hat.sub(x)?;
    for i in 0..grad.batch() {
        let row = grad.row_mut(i);
        let norm = (row.iter().map(|v| v * v).sum::<f64>() + NORM_GUARD).sqrt();
        let k = scale / norm;
        row.iter_mut().for_each(|v| *v *= k);
    }
    Ok(grad)
}

/// Per-row Euclidean distance between two `[b, k]` embeddings.
pub fn distances(e1: &Tensor, e2: &Tensor) -> Result<Vec<f64>> {
    if e1.shape() != e2.shape() {
        return Err(SevenError::ShapeMismatch {
            op: "distance",
            left: e1.shape().to_vec(),
            right: e2.shape().to_vec(),
        });
    }
    Ok((0..e1.batch())
        .map(|i| {
            e1.row(i)
                .iter()
                .zip(e2.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}
