//! Sample sets, ingestion, pair manifests and batching.

mod batches;
mod idx;
mod images;
mod pairs;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use batches::{batch_ranges, epoch_order, gather_batch, BatchPlan};
pub use idx::{ingest_idx, parse_idx_images, parse_idx_labels};
pub use images::{ingest_image_dir, DirIngest};
pub use pairs::{
    check_class_disjoint, holdout, make_pairs, split_label_budget, LabelDraw, Pair, PairManifest,
};

use crate::error::{Result, SevenError};
use crate::rng::{self, Stream};
use crate::tensor::{ByteReader, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Images `[n, c, h, w]` with one class id per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    images: Tensor,
    class_ids: Vec<u32>,
    split: SplitTag,
}

const ARCHIVE_MAGIC: &[u8; 12] = b"SEVN-SAMPLES";
const ARCHIVE_VERSION: u32 = 1;

impl SampleSet {
    pub fn new(images: Tensor, class_ids: Vec<u32>, split: SplitTag) -> Result<Self> {
        if images.rank() != 4 {
            return Err(SevenError::invalid(format!(
                "sample images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != class_ids.len() {
            return Err(SevenError::invalid(format!(
                "{} images but {} class ids",
                images.batch(),
                class_ids.len()
            )));
        }
        Ok(SampleSet {
            images,
            class_ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Per-sample `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &c in &self.class_ids {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }

    /// Stacks the listed samples into a `[k, c, h, w]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= self.len() {
                return Err(SevenError::invalid(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.images.row(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data)
    }

    pub fn select(&self, indices: &[usize]) -> Result<SampleSet> {
        let images = self.gather(indices)?;
        let class_ids = indices.iter().map(|&i| self.class_ids[i]).collect();
        SampleSet::new(images, class_ids, self.split)
    }

    /// `k` samples chosen uniformly without replacement, kept in their
    /// original order.
    pub fn seeded_subset(&self, k: usize, seed: u64) -> Result<SampleSet> {
        if k > self.len() {
            return Err(SevenError::invalid(format!(
                "subset of {k} from {} samples",
                self.len()
            )));
        }
        let mut r = rng::stream(seed, Stream::Subset);
        let mut chosen = rand::seq::index::sample(&mut r, self.len(), k).into_vec();
        chosen.sort_unstable();
        self.select(&chosen)
    }

    /// Seeded random split into `(fraction, 1 - fraction)` parts, e.g. the
    /// 85/15 USPS protocol. The first part is tagged train, the second test.
    pub fn split_fraction(&self, fraction: f64, seed: u64) -> Result<(SampleSet, SampleSet)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(SevenError::invalid(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, Stream::Subset));
        let cut = (fraction * self.len() as f64).round() as usize;
        let (a, b) = order.split_at(cut);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        let mut train = self.select(&a)?;
        let mut test = self.select(&b)?;
        train.split = SplitTag::Train;
        test.split = SplitTag::Test;
        Ok((train, test))
    }

    /// Adds an independent `U[lo, hi)` draw to every pixel. Values are not
    /// clamped afterwards.
    pub fn add_uniform_noise(&self, lo: f64, hi: f64, seed: u64) -> Result<SampleSet> {
        if lo.is_nan() || hi.is_nan() || hi < lo {
            return Err(SevenError::invalid(format!("noise range [{lo}, {hi}) is empty")));
        }
        if lo == hi {
            return Ok(self.map_pixels(|v| v + lo));
        }
        let mut r = rng::stream(seed, Stream::Noise);
        Ok(self.map_pixels(|v| v + r.random_range(lo..hi)))
    }

    fn map_pixels(&self, mut f: impl FnMut(f64) -> f64) -> SampleSet {
        let mut out = self.clone();
        out.images.data_mut().iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn to_archive(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.len() * 4 + self.images.len() * 8);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.push(match self.split {
            SplitTag::Train => 0,
            SplitTag::Test => 1,
        });
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &c in &self.class_ids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        self.images.write_snapshot(&mut out);
        out
    }

    pub fn from_archive(bytes: &[u8], context: &str) -> Result<SampleSet> {
        let mut r = ByteReader::new(bytes, context);
        if r.take(ARCHIVE_MAGIC.len())? != ARCHIVE_MAGIC {
            return Err(r.error_at(0, "not a sample archive (bad magic)"));
        }
        let version = r.u32_le()?;
        if version != ARCHIVE_VERSION {
            return Err(r.error_at(12, format!("unsupported archive version {version}")));
        }
        let split = match r.u8()? {
            0 => SplitTag::Train,
            1 => SplitTag::Test,
            t => return Err(r.error_at(16, format!("unknown split tag {t}"))),
        };
        let n = r.u64()? as usize;
        let ids = r.take(n.checked_mul(4).ok_or_else(|| r.error_at(17, "count overflow"))?)?;
        let class_ids = ids
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let images = Tensor::read_snapshot(&mut r)?;
        if !r.is_empty() {
            return Err(r.error_at(r.offset(), "trailing bytes after archive"));
        }
        SampleSet::new(images, class_ids, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_archive()).map_err(|e| SevenError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SampleSet> {
        let bytes = fs::read(path).map_err(|e| SevenError::io(path, e))?;
        SampleSet::from_archive(&bytes, &path.display().to_string())
    }
}
