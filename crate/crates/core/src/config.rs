//! Run configuration and the data preparation it describes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    check_class_disjoint, ingest_idx, ingest_image_dir, make_pairs, split_label_budget, LabelDraw,
    PairManifest, SampleSet, SplitTag,
};
use crate::error::{Result, SevenError};
use crate::train::HyperParams;

/// Where a sample set comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    /// `root/<class>/<image>` resized to `size = [height, width]`.
    ImageDir { root: PathBuf, size: (usize, usize) },
    /// A sample archive written by `seven ingest`.
    Archive { path: PathBuf },
}

impl DataSource {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Idx { images, labels } => vec![images, labels],
            DataSource::ImageDir { root, .. } => vec![root],
            DataSource::Archive { path } => vec![path],
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DataSource::Idx { images, labels } => vec![images, labels],
            DataSource::ImageDir { root, .. } => vec![root],
            DataSource::Archive { path } => vec![path],
        }
    }

    pub fn load(&self, split: SplitTag) -> Result<SampleSet> {
        match self {
            DataSource::Idx { images, labels } => ingest_idx(images, labels, split),
            DataSource::ImageDir { root, size } => {
                let out = ingest_image_dir(root, *size, split)?;
                if !out.skipped.is_empty() {
                    log::warn!("{} unreadable images skipped under {}", out.skipped.len(), root.display());
                }
                Ok(out.samples)
            }
            DataSource::Archive { path } => {
                let mut s = SampleSet::load(path)?;
                if s.split() != split {
                    s = SampleSet::new(s.images().clone(), s.class_ids().to_vec(), split)?;
                }
                Ok(s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default)]
    pub test: Option<DataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsConfig {
    /// Labeled pairs kept in the training manifest; `None` keeps all.
    pub label_budget: Option<usize>,
    pub strict_uniform_label_draw: bool,
    /// Seeded subset of the training samples.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Uniform pixel noise `[lo, hi)` added to every sample.
    pub noise: Option<(f64, f64)>,
    /// Assert that train and test share no class.
    pub disjoint_classes: bool,
    /// Seed for subsets, noise, pairing and the label split. Defaults to the
    /// training seed.
    pub seed: Option<u64>,
    /// Fraction of training pairs held out when a sweep needs validation.
    pub validation_fraction: f64,
}

impl Default for PairsConfig {
    fn default() -> Self {
        PairsConfig {
            label_budget: None,
            strict_uniform_label_draw: false,
            train_subset: None,
            test_subset: None,
            noise: None,
            disjoint_classes: false,
            seed: None,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub hyper: HyperParams,
    pub data: DataConfig,
    #[serde(default)]
    pub pairs: PairsConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Samples and pairs ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train_samples: SampleSet,
    pub train_pairs: PairManifest,
    pub test: Option<(SampleSet, PairManifest)>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| SevenError::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let p = &self.pairs;
        if let Some((lo, hi)) = p.noise {
            if lo.is_nan() || hi.is_nan() || hi < lo {
                return Err(SevenError::invalid(format!("noise range [{lo}, {hi}) is empty")));
            }
        }
        if !(0.0..1.0).contains(&p.validation_fraction) {
            return Err(SevenError::invalid(format!(
                "validation_fraction must be in [0, 1), got {}",
                p.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.pairs.seed.unwrap_or(self.hyper.seed)
    }

    /// Joins relative data paths onto `root`.
    pub fn resolve_paths(&mut self, root: &Path) {
        let sources = std::iter::once(&mut self.data.train).chain(self.data.test.as_mut());
        for source in sources {
            for p in source.paths_mut() {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
        }
    }

    pub fn missing_paths(&self) -> Vec<PathBuf> {
        std::iter::once(&self.data.train)
            .chain(self.data.test.as_ref())
            .flat_map(|s| s.paths())
            .filter(|p| !p.exists())
            .map(Path::to_path_buf)
            .collect()
    }

    fn load_source(&self, source: &DataSource, split: SplitTag, subset: Option<usize>) -> Result<SampleSet> {
        // Train and test draw subsets and noise from different seeds.
        let seed = self.data_seed() ^ split_salt(split);
        let mut s = source.load(split)?;
        if let Some(k) = subset {
            s = s.seeded_subset(k, seed)?;
        }
        if let Some((lo, hi)) = self.pairs.noise {
            s = s.add_uniform_noise(lo, hi, seed)?;
        }
        Ok(s)
    }

    pub fn load_train_samples(&self) -> Result<SampleSet> {
        self.load_source(&self.data.train, SplitTag::Train, self.pairs.train_subset)
    }

    /// Test samples and their fully labeled pairs, if a test source is set.
    pub fn load_test(&self, train: &SampleSet) -> Result<Option<(SampleSet, PairManifest)>> {
        let Some(source) = &self.data.test else {
            return Ok(None);
        };
        let s = self.load_source(source, SplitTag::Test, self.pairs.test_subset)?;
        if self.pairs.disjoint_classes {
            check_class_disjoint(train, &s)?;
        }
        let m = make_pairs(&s, self.data_seed() ^ split_salt(SplitTag::Test))?;
        Ok(Some((s, m)))
    }

    /// Applies the label budget, if any, with the configured draw.
    pub fn label_split(&self, pairs: &PairManifest, budget: Option<usize>) -> Result<PairManifest> {
        let Some(budget) = budget else {
            return Ok(pairs.clone());
        };
        let draw = if self.pairs.strict_uniform_label_draw {
            LabelDraw::StrictUniform
        } else {
            LabelDraw::Balanced
        };
        split_label_budget(pairs, budget, self.data_seed(), draw)
    }

    /// Loads, subsets, perturbs and pairs the configured data.
    pub fn prepare(&self) -> Result<Prepared> {
        let train_samples = self.load_train_samples()?;
        let all = make_pairs(&train_samples, self.data_seed())?;
        let train_pairs = self.label_split(&all, self.pairs.label_budget)?;
        let test = self.load_test(&train_samples)?;
        Ok(Prepared {
            train_samples,
            train_pairs,
            test,
        })
    }
}

fn split_salt(split: SplitTag) -> u64 {
    match split {
        SplitTag::Train => 0,
        SplitTag::Test => 0x7E57,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_expands_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"data": {"train": {"format": "archive", "path": "train.bin"}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.hyper, HyperParams::default());
        assert_eq!(cfg.pairs.validation_fraction, 0.2);
        let json = cfg.to_json().unwrap();
        assert!(json.contains("\"alpha\": 0.05"));
        assert_eq!(RunConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            r#"{"data": {"train": {"format": "archive", "path": "x"}}, "bogus": 1}"#,
            r#"{"data": {"train": {"format": "archive", "path": "x", "extra": 2}}}"#,
            r#"{"data": {"train": {"format": "archive", "path": "x"}}, "hyper": {"alfa": 1}}"#,
            r#"{"data": {"train": {"format": "archive", "path": "x"}}, "pairs": {"budget": 1}}"#,
        ] {
            assert!(RunConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let bad = r#"{"data": {"train": {"format": "archive", "path": "x"}}, "hyper": {"batch_size": 1}}"#;
        assert!(RunConfig::from_json(bad).is_err());
    }

    #[test]
    fn relative_paths_join_root() {
        let mut cfg = RunConfig::from_json(
            r#"{"data": {"train": {"format": "idx", "images": "a", "labels": "/abs/b"}}}"#,
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/data"));
        assert_eq!(
            cfg.data.train,
            DataSource::Idx {
                images: "/data/a".into(),
                labels: "/abs/b".into()
            }
        );
    }
}
