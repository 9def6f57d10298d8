//! Verification accuracy, threshold calibration and experiment drivers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PairManifest, SampleSet};
use crate::error::{Result, SevenError};
use crate::loss::Relation;
use crate::model::{decide, SevenModel};
use crate::train::{fit, HyperParams, TrainTrace, Variant};

/// Samples embedded per inference call.
const EMBED_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub total: usize,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepPoint>>,
}

/// Confusion counts of the rule `d <= tau` against `labels`.
pub fn report_from_distances(distances: &[f64], labels: &[Relation], tau: f64) -> Result<EvalReport> {
    if distances.len() != labels.len() {
        return Err(SevenError::invalid(format!(
            "{} distances but {} labels",
            distances.len(),
            labels.len()
        )));
    }
    if distances.is_empty() {
        return Err(SevenError::invalid("no pairs to evaluate"));
    }
    let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
    for (&d, &truth) in distances.iter().zip(labels) {
        match (decide(d, tau), truth) {
            (Relation::Pos, Relation::Pos) => tp += 1,
            (Relation::Neg, Relation::Neg) => tn += 1,
            (Relation::Pos, Relation::Neg) => fp += 1,
            (Relation::Neg, Relation::Pos) => fneg += 1,
        }
    }
    let total = distances.len();
    Ok(EvalReport {
        accuracy: (tp + tn) as f64 / total as f64,
        true_pos: tp,
        true_neg: tn,
        false_pos: fp,
        false_neg: fneg,
        total,
        tau,
        sweep: None,
    })
}

/// Accuracy at each grid point.
pub fn sweep_tau(distances: &[f64], labels: &[Relation], grid: &[f64]) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&tau| {
            Ok(SweepPoint {
                tau,
                accuracy: report_from_distances(distances, labels, tau)?.accuracy,
            })
        })
        .collect()
}

/// The grid value with the best accuracy; ties go to the smallest tau.
pub fn best_tau(distances: &[f64], labels: &[Relation], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(SevenError::invalid("empty tau grid"));
    }
    let mut best: Option<SweepPoint> = None;
    for p in sweep_tau(distances, labels, grid)? {
        let better = match best {
            None => true,
            Some(b) => p.accuracy > b.accuracy || (p.accuracy == b.accuracy && p.tau < b.tau),
        };
        if better {
            best = Some(p);
        }
    }
    Ok(best.unwrap().tau)
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn tau_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 || lo.is_nan() || hi.is_nan() || lo > hi || lo < 0.0 {
        return Err(SevenError::invalid(format!("bad tau grid {lo}:{hi}:{n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (n - 1) as f64;
    // Snapped to 1e-12 so decimal grids land on their nominal points
    // (0.05:0.95:19 contains exactly 0.5).
    Ok((0..n)
        .map(|k| if k == n - 1 { hi } else { ((lo + step * k as f64) * 1e12).round() / 1e12 })
        .collect())
}

fn truth(m: &PairManifest) -> Result<Vec<Relation>> {
    m.pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            p.relation.ok_or_else(|| {
                SevenError::invalid(format!("pair {k} ({}, {}) is unlabeled; evaluation needs labels", p.i, p.j))
            })
        })
        .collect()
}

/// Embedding distance of every manifest pair. Each referenced sample is
/// embedded once, in sorted chunks, so the result does not depend on pair
/// order.
pub fn manifest_distances(model: &SevenModel, m: &PairManifest, s: &SampleSet) -> Result<Vec<f64>> {
    m.verify_against(s)?;
    let mut used: Vec<usize> = m.pairs.iter().flat_map(|p| [p.i, p.j]).collect();
    used.sort_unstable();
    used.dedup();
    let chunks: Vec<Vec<f64>> = used
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| Ok(model.embed(&s.gather(chunk)?)?.into_data()))
        .collect::<Result<_>>()?;
    let width = model.embedding_width();
    let flat: Vec<f64> = chunks.concat();
    let mut slot = vec![usize::MAX; s.len()];
    for (k, &i) in used.iter().enumerate() {
        slot[i] = k;
    }
    let row = |i: usize| &flat[slot[i] * width..(slot[i] + 1) * width];
    Ok(m.pairs
        .iter()
        .map(|p| {
            row(p.i)
                .iter()
                .zip(row(p.j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Verification accuracy on a fully labeled manifest.
pub fn evaluate(model: &SevenModel, m: &PairManifest, s: &SampleSet, tau: f64) -> Result<EvalReport> {
    let labels = truth(m)?;
    report_from_distances(&manifest_distances(model, m, s)?, &labels, tau)
}

/// [`evaluate`] plus the accuracy curve over `grid`.
pub fn evaluate_with_sweep(
    model: &SevenModel,
    m: &PairManifest,
    s: &SampleSet,
    tau: f64,
    grid: &[f64],
) -> Result<EvalReport> {
    let labels = truth(m)?;
    let d = manifest_distances(model, m, s)?;
    let mut report = report_from_distances(&d, &labels, tau)?;
    report.sweep = Some(sweep_tau(&d, &labels, grid)?);
    Ok(report)
}

/// Threshold from `grid` maximizing accuracy on labeled validation pairs.
pub fn calibrate_tau(model: &SevenModel, m: &PairManifest, s: &SampleSet, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(SevenError::invalid("empty tau grid"));
    }
    let labels = truth(m)?;
    best_tau(&manifest_distances(model, m, s)?, &labels, grid)
}

/// Train on one manifest, evaluate on another.
pub struct Experiment<'a> {
    pub train_pairs: &'a PairManifest,
    pub train_samples: &'a SampleSet,
    pub eval_pairs: &'a PairManifest,
    pub eval_samples: &'a SampleSet,
}

impl Experiment<'_> {
    pub fn run(&self, hp: &HyperParams) -> Result<(SevenModel, TrainTrace, EvalReport)> {
        let (model, _, trace) = fit(self.train_pairs, self.train_samples, hp)?;
        let report = evaluate(&model, self.eval_pairs, self.eval_samples, hp.tau)?;
        Ok((model, trace, report))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub accuracy: f64,
}

/// One independent training run per alpha with shared seed and pairs.
pub fn sweep_alpha(base: &HyperParams, alphas: &[f64], exp: &Experiment<'_>) -> Result<Vec<AlphaPoint>> {
    if alphas.is_empty() {
        return Err(SevenError::invalid("alpha list is empty"));
    }
    alphas
        .par_iter()
        .map(|&alpha| {
            let hp = HyperParams {
                alpha,
                ..base.clone()
            };
            let (_, _, report) = exp.run(&hp)?;
            Ok(AlphaPoint {
                alpha,
                accuracy: report.accuracy,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
}

/// Every variant at every seed, on the same pairs.
pub fn ablate(base: &HyperParams, variants: &[Variant], seeds: &[u64], exp: &Experiment<'_>) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let hp = HyperParams {
                variant,
                seed,
                ..base.clone()
            };
            let (_, _, report) = exp.run(&hp)?;
            Ok(AblationRow {
                variant,
                seed,
                accuracy: report.accuracy,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::data::{make_pairs, Pair, SplitTag};
    use crate::tensor::Tensor;
    use Relation::{Neg, Pos};

    #[test]
    fn constant_predictor_on_balanced_set() {
        let r = report_from_distances(&[0.0; 4], &[Pos, Neg, Pos, Neg], 0.5).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!((r.true_pos, r.false_pos, r.true_neg, r.false_neg), (2, 2, 0, 0));
    }

    #[test]
    fn perfect_margin() {
        let d = [0.0, 1.0, 0.0, 1.0];
        let labels = [Pos, Neg, Pos, Neg];
        assert_eq!(report_from_distances(&d, &labels, 0.5).unwrap().accuracy, 1.0);
        let grid = tau_grid(0.1, 0.9, 9).unwrap();
        assert_eq!(best_tau(&d, &labels, &grid).unwrap(), 0.1);
        assert_eq!(best_tau(&d, &labels, &[0.5]).unwrap(), 0.5);
        assert!(best_tau(&d, &labels, &[]).is_err());
    }

    #[test]
    fn zero_threshold_misses_positive_at_distance() {
        let r = report_from_distances(&[0.2, 0.0], &[Pos, Pos], 0.0).unwrap();
        assert_eq!((r.true_pos, r.false_neg), (1, 1));
    }

    #[test]
    fn grid_arithmetic() {
        let g = tau_grid(0.05, 0.95, 19).unwrap();
        assert_eq!(g.len(), 19);
        assert_eq!((g[0], g[18]), (0.05, 0.95));
        assert_eq!(g[1], 0.1);
        assert_eq!(g[9], 0.5);
        assert!(tau_grid(0.5, 0.1, 3).is_err());
    }

    #[test]
    fn evaluate_rejects_unlabeled_and_is_order_free() {
        let n = 12;
        let images = Tensor::from_fn(&[n, 1, 4, 4], |i| ((i * 31) % 17) as f64 / 17.0);
        let s = SampleSet::new(images, (0..n as u32).map(|i| i % 3).collect(), SplitTag::Test).unwrap();
        let m = make_pairs(&s, 4).unwrap();
        let model = SevenModel::new(ArchSpec::tiny(), 1).unwrap();
        let a = evaluate(&model, &m, &s, 0.5).unwrap();
        let mut rev = m.clone();
        rev.pairs.reverse();
        assert_eq!(evaluate(&model, &rev, &s, 0.5).unwrap(), a);
        assert_eq!(a.true_pos + a.true_neg + a.false_pos + a.false_neg, a.total);
        let mut unl = m.clone();
        unl.pairs[3] = Pair { relation: None, ..unl.pairs[3] };
        assert!(evaluate(&model, &unl, &s, 0.5).is_err());
        // Direct model distances agree with the deduplicated path.
        let d = manifest_distances(&model, &m, &s).unwrap();
        let x1 = s.gather(&m.pairs.iter().map(|p| p.i).collect::<Vec<_>>()).unwrap();
        let x2 = s.gather(&m.pairs.iter().map(|p| p.j).collect::<Vec<_>>()).unwrap();
        let direct = model.pair_distances(&x1, &x2).unwrap();
        for (a, b) in d.iter().zip(direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
