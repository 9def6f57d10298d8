use std::ops::Range;

use rand::seq::SliceRandom;

use super::{PairManifest, SampleSet};
use crate::error::Result;
use crate::model::PairBatch;
use crate::rng::{self, Stream};

/// Pair order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::epoch_stream(seed, Stream::Shuffle, epoch));
    order
}

/// Consecutive batches of `batch_size`; the final short batch is kept. With
/// `merge_singleton`, a final batch of one joins the batch before it.
pub fn batch_ranges(n: usize, batch_size: usize, merge_singleton: bool) -> Vec<Range<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut ranges: Vec<Range<usize>> = (0..n)
        .step_by(batch_size)
        .map(|start| start..(start + batch_size).min(n))
        .collect();
    if merge_singleton && ranges.len() >= 2 && ranges.last().is_some_and(|r| r.len() == 1) {
        let last = ranges.pop().unwrap();
        ranges.last_mut().unwrap().end = last.end;
    }
    ranges
}

/// The batches of one epoch as lists of manifest positions.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    order: Vec<usize>,
    ranges: Vec<Range<usize>>,
}

impl BatchPlan {
    pub fn new(n_pairs: usize, batch_size: usize, seed: u64, epoch: usize, merge_singleton: bool) -> Self {
        BatchPlan {
            order: epoch_order(n_pairs, seed, epoch),
            ranges: batch_ranges(n_pairs, batch_size, merge_singleton),
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.ranges.iter().map(|r| &self.order[r.clone()])
    }
}

/// Materializes the listed manifest pairs as a batch.
pub fn gather_batch(m: &PairManifest, s: &SampleSet, positions: &[usize]) -> Result<PairBatch> {
    let pairs: Vec<_> = positions.iter().map(|&k| m.pairs[k]).collect();
    let left: Vec<usize> = pairs.iter().map(|p| p.i).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.j).collect();
    PairBatch::new(
        s.gather(&left)?,
        s.gather(&right)?,
        pairs.iter().map(|p| p.relation).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_arithmetic() {
        let lens: Vec<usize> = batch_ranges(10, 4, true).iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        let lens: Vec<usize> = batch_ranges(9, 4, true).iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![4, 5]);
        let lens: Vec<usize> = batch_ranges(9, 4, false).iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![4, 4, 1]);
        assert_eq!(batch_ranges(1, 4, true), vec![0..1]);
        assert!(batch_ranges(0, 4, true).is_empty());
    }

    #[test]
    fn plan_is_seeded_and_complete() {
        let a = BatchPlan::new(37, 8, 5, 2, true);
        let b = BatchPlan::new(37, 8, 5, 2, true);
        assert_eq!(a.iter().collect::<Vec<_>>(), b.iter().collect::<Vec<_>>());
        let c = BatchPlan::new(37, 8, 5, 3, true);
        assert_ne!(a.iter().collect::<Vec<_>>(), c.iter().collect::<Vec<_>>());
        let mut seen: Vec<usize> = a.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
    }
}
