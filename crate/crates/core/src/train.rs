//! The training loop and its hyperparameters.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchOptions, ArchSpec, Preset};
use crate::data::{gather_batch, BatchPlan, PairManifest, SampleSet};
use crate::error::{Result, SevenError};
use crate::model::{LossConfig, RegNorm, SevenModel};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Joint discriminative and generative training.
    #[default]
    Seven,
    /// Discriminative only: the decoder is never run.
    #[serde(rename = "disseven")]
    DisSeven,
    /// Generative only: labels are ignored.
    #[serde(rename = "genseven")]
    GenSeven,
    /// Joint training with fully connected encoder and decoder.
    SevenMlp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Seven, Variant::DisSeven, Variant::GenSeven, Variant::SevenMlp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Seven => "seven",
            Variant::DisSeven => "disseven",
            Variant::GenSeven => "genseven",
            Variant::SevenMlp => "seven_mlp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = SevenError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                SevenError::invalid(format!(
                    "unknown variant {s:?} (expected seven, disseven, genseven or seven_mlp)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Weight of the reconstruction term.
    pub alpha: f64,
    /// Weight of the parameter-norm term.
    pub beta: f64,
    /// Distance threshold for a positive decision.
    pub tau: f64,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub preset: Preset,
    pub reg_norm: RegNorm,
    pub decoder_final_dropout: bool,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        let opt = RmsPropConfig::default();
        HyperParams {
            alpha: 0.05,
            beta: 1e-4,
            tau: 0.5,
            lr: opt.lr,
            rho: opt.rho,
            eps: opt.eps,
            batch_size: 64,
            epochs: 150,
            seed: 0,
            variant: Variant::Seven,
            preset: Preset::Mnist,
            reg_norm: RegNorm::Squared,
            decoder_final_dropout: false,
            checkpoint_every: 0,
        }
    }
}

impl HyperParams {
    /// Defaults with the per-dataset generative weight.
    pub fn for_preset(preset: Preset) -> Self {
        let alpha = match preset {
            Preset::Lfw => 0.1,
            Preset::Sonof => 0.2,
            _ => 0.05,
        };
        HyperParams {
            alpha,
            preset,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(SevenError::invalid(msg)) };
        check(self.alpha >= 0.0 && self.alpha.is_finite(), format!("alpha must be >= 0, got {}", self.alpha))?;
        check(self.beta >= 0.0 && self.beta.is_finite(), format!("beta must be >= 0, got {}", self.beta))?;
        check(self.tau >= 0.0 && self.tau.is_finite(), format!("tau must be >= 0, got {}", self.tau))?;
        check(self.lr > 0.0 && self.lr.is_finite(), format!("lr must be > 0, got {}", self.lr))?;
        check((0.0..1.0).contains(&self.rho), format!("rho must be in [0, 1), got {}", self.rho))?;
        check(self.eps > 0.0, format!("eps must be > 0, got {}", self.eps))?;
        check(self.batch_size >= 2, format!("batch_size must be >= 2, got {}", self.batch_size))?;
        check(self.epochs >= 1, format!("epochs must be >= 1, got {}", self.epochs))?;
        check(
            !(self.variant == Variant::GenSeven && self.alpha == 0.0),
            "genseven with alpha = 0 has no data term".into(),
        )
    }

    /// True when only the discriminative term is trained: the DisSEVEN
    /// variant, or any joint variant with `alpha = 0`.
    pub fn discriminative_only(&self) -> bool {
        match self.variant {
            Variant::DisSeven => true,
            Variant::Seven | Variant::SevenMlp => self.alpha == 0.0,
            Variant::GenSeven => false,
        }
    }

    /// The alpha actually used, after variant overrides.
    pub fn effective_alpha(&self) -> f64 {
        if self.discriminative_only() {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.effective_alpha(),
            beta: self.beta,
            reg_norm: self.reg_norm,
            discriminative: self.variant != Variant::GenSeven,
            generative: !self.discriminative_only(),
        }
    }

    pub fn optimizer(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.lr,
            rho: self.rho,
            eps: self.eps,
        }
    }

    /// Architecture for per-sample inputs of `input = [c, h, w]`.
    pub fn build_arch(&self, input: &[usize]) -> Result<ArchSpec> {
        let [c, h, w] = *input else {
            return Err(SevenError::invalid(format!("input must be [c, h, w], got {input:?}")));
        };
        let options = ArchOptions {
            decoder_final_dropout: self.decoder_final_dropout,
        };
        if self.variant == Variant::SevenMlp || self.preset == Preset::Mlp {
            return Ok(ArchSpec::mlp([c, h, w], options));
        }
        if c != 1 {
            return Err(SevenError::invalid(format!(
                "convolutional presets take one channel, got {c}"
            )));
        }
        match self.preset {
            Preset::Mnist | Preset::Usps => ArchSpec::digits(self.preset, h, w, options),
            Preset::Lfw | Preset::Sonof => ArchSpec::faces(self.preset, h, w, options),
            Preset::Custom if input == [1, 4, 4] => Ok(ArchSpec::tiny()),
            Preset::Custom => Err(SevenError::invalid(
                "the custom preset only covers the 1x4x4 test network",
            )),
            Preset::Mlp => unreachable!(),
        }
    }
}

/// Means over one epoch, each weighted by batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub discriminative: f64,
    pub generative: f64,
    pub regularization: f64,
    /// Labeled pairs that entered the discriminative term.
    pub labeled_pairs: usize,
    pub pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    /// Wall time per epoch in seconds. Kept apart from `records` so the
    /// trace CSV is reproducible byte for byte.
    pub wall_seconds: Vec<f64>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record([
                "epoch",
                "total",
                "discriminative",
                "generative",
                "regularization",
                "labeled_pairs",
                "pairs",
            ])?;
        }
        csv_string(w)
    }

    pub fn timing_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "wall_seconds"])?;
        for (r, t) in self.records.iter().zip(&self.wall_seconds) {
            w.write_record([r.epoch.to_string(), t.to_string()])?;
        }
        csv_string(w)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| SevenError::invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs `hp.epochs` epochs of shuffled mini-batch RMSProp on `manifest`.
/// `on_epoch` sees each finished epoch, e.g. to write checkpoints.
pub fn train(
    model: &mut SevenModel,
    optimizer: &mut RmsProp,
    manifest: &PairManifest,
    samples: &SampleSet,
    hp: &HyperParams,
    mut on_epoch: impl FnMut(&EpochRecord, &SevenModel, &RmsProp) -> Result<()>,
) -> Result<TrainTrace> {
    hp.validate()?;
    if samples.sample_shape() != model.arch().input.as_slice() {
        return Err(SevenError::ShapeMismatch {
            op: "samples vs model input",
            left: samples.sample_shape().to_vec(),
            right: model.arch().input.clone(),
        });
    }
    manifest.verify_against(samples)?;
    let filtered;
    let manifest = if hp.discriminative_only() {
        filtered = manifest.labeled_only();
        &filtered
    } else {
        manifest
    };
    let has_bn = model.arch().has_batch_norm();
    if manifest.is_empty() || (has_bn && manifest.len() < 2) {
        return Err(SevenError::invalid(format!(
            "{} trainable pairs for variant {}; batch norm needs at least 2",
            manifest.len(),
            hp.variant
        )));
    }
    let cfg = hp.loss_config();
    let mut trace = TrainTrace::default();
    for epoch in 0..hp.epochs {
        let start = Instant::now();
        let plan = BatchPlan::new(manifest.len(), hp.batch_size, hp.seed, epoch, has_bn);
        let mut dropout = rng::epoch_stream(hp.seed, Stream::Dropout, epoch);
        let mut sums = [0.0; 4];
        let mut labeled = 0;
        for (b, positions) in plan.iter().enumerate() {
            let batch = gather_batch(manifest, samples, positions)?;
            let report = model.forward_backward(&batch, &cfg, &mut dropout)?;
            if !report.is_finite() {
                return Err(SevenError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    total: report.total,
                    discriminative: report.discriminative,
                    generative: report.generative,
                });
            }
            optimizer.step(model.named_params_mut())?;
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([
                report.total,
                report.discriminative,
                report.generative,
                report.regularization,
            ]) {
                *s += w * v;
            }
            if cfg.discriminative {
                labeled += report.labeled;
            }
        }
        let n = manifest.len() as f64;
        let record = EpochRecord {
            epoch,
            total: sums[0] / n,
            discriminative: sums[1] / n,
            generative: sums[2] / n,
            regularization: sums[3] / n,
            labeled_pairs: labeled,
            pairs: manifest.len(),
        };
        let secs = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: total {:.5} disc {:.5} gen {:.4} reg {:.2} ({secs:.1}s)",
            record.total,
            record.discriminative,
            record.generative,
            record.regularization
        );
        on_epoch(&record, model, optimizer)?;
        trace.records.push(record);
        trace.wall_seconds.push(secs);
    }
    Ok(trace)
}

/// Builds a fresh model for `samples`, trains it, and returns everything.
pub fn fit(manifest: &PairManifest, samples: &SampleSet, hp: &HyperParams) -> Result<(SevenModel, RmsProp, TrainTrace)> {
    let arch = hp.build_arch(samples.sample_shape())?;
    let mut model = SevenModel::new(arch, hp.seed)?;
    let mut optimizer = RmsProp::new(hp.optimizer());
    let trace = train(&mut model, &mut optimizer, manifest, samples, hp, |_, _, _| Ok(()))?;
    Ok((model, optimizer, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pairs, split_label_budget, LabelDraw, SplitTag};
    use crate::tensor::Tensor;
    use rand::Rng as _;

    fn toy() -> (SampleSet, PairManifest) {
        let mut r = rng::seeded(3);
        let n = 24;
        let classes: Vec<u32> = (0..n as u32).map(|i| i % 3).collect();
        let images = Tensor::from_fn(&[n, 1, 4, 4], |k| {
            let c = classes[k / 16] as f64;
            (0.3 * c + 0.2 * r.random::<f64>()).min(1.0)
        });
        let s = SampleSet::new(images, classes, SplitTag::Train).unwrap();
        let m = make_pairs(&s, 1).unwrap();
        let m = split_label_budget(&m, 12, 2, LabelDraw::Balanced).unwrap();
        (s, m)
    }

    fn tiny_hp(variant: Variant) -> HyperParams {
        HyperParams {
            preset: Preset::Custom,
            variant,
            epochs: 3,
            batch_size: 8,
            alpha: 0.1,
            beta: 1e-3,
            seed: 11,
            ..HyperParams::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn validation() {
        HyperParams::default().validate().unwrap();
        for bad in [
            HyperParams { alpha: -1.0, ..Default::default() },
            HyperParams { batch_size: 1, ..Default::default() },
            HyperParams { epochs: 0, ..Default::default() },
            HyperParams { tau: -0.1, ..Default::default() },
            HyperParams { variant: Variant::GenSeven, alpha: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn variant_traces() {
        let (s, m) = toy();
        let (_, _, dis) = fit(&m, &s, &tiny_hp(Variant::DisSeven)).unwrap();
        assert!(dis.records.iter().all(|r| r.generative == 0.0 && r.pairs == 12));
        let (_, _, gen) = fit(&m, &s, &tiny_hp(Variant::GenSeven)).unwrap();
        assert!(gen.records.iter().all(|r| r.discriminative == 0.0 && r.labeled_pairs == 0));
        let (_, _, joint) = fit(&m, &s, &tiny_hp(Variant::Seven)).unwrap();
        assert!(joint.records.iter().all(|r| r.generative > 0.0 && r.labeled_pairs == 12));
        assert_eq!(joint.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn training_is_deterministic() {
        let (s, m) = toy();
        let hp = tiny_hp(Variant::Seven);
        let (a, _, ta) = fit(&m, &s, &hp).unwrap();
        let (b, _, tb) = fit(&m, &s, &hp).unwrap();
        assert_eq!(ta.to_csv().unwrap(), tb.to_csv().unwrap());
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn alpha_zero_is_disseven() {
        let (s, m) = toy();
        let zero = HyperParams {
            alpha: 0.0,
            ..tiny_hp(Variant::Seven)
        };
        let (a, _, ta) = fit(&m, &s, &zero).unwrap();
        let (b, _, tb) = fit(&m, &s, &tiny_hp(Variant::DisSeven)).unwrap();
        assert_eq!(ta, TrainTrace { wall_seconds: ta.wall_seconds.clone(), ..tb.clone() });
        assert_eq!(a.embed(s.images()).unwrap(), b.embed(s.images()).unwrap());
    }

    #[test]
    fn disseven_ignores_unlabeled_pairs() {
        let (s, m) = toy();
        let hp = tiny_hp(Variant::DisSeven);
        let (a, _, _) = fit(&m, &s, &hp).unwrap();
        let (b, _, _) = fit(&m.labeled_only(), &s, &hp).unwrap();
        let enc = |model: &SevenModel| -> Vec<Tensor> {
            model.encoder().named_params("e").into_iter().map(|(_, p)| p.value.clone()).collect()
        };
        assert_eq!(enc(&a), enc(&b));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (s, m) = toy();
        let hp = tiny_hp(Variant::Seven);
        let mut model = SevenModel::new(hp.build_arch(&[1, 4, 4]).unwrap(), 1).unwrap();
        model.named_params_mut()[0].1.value.data_mut()[0] = f64::NAN;
        let mut opt = RmsProp::new(hp.optimizer());
        let err = train(&mut model, &mut opt, &m, &s, &hp, |_, _, _| Ok(())).unwrap_err();
        assert!(matches!(err, SevenError::NonFiniteLoss { epoch: 0, batch: 0, .. }), "{err}");
    }
}
