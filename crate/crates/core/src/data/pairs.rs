use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{SampleSet, SplitTag};
use crate::error::{Result, SevenError};
use crate::loss::Relation;
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    /// `None` for an unlabeled pair.
    pub relation: Option<Relation>,
}

/// Pairs over one sample set, with the provenance needed to rebuild them.
#[derive(Clone, Debug, PartialEq)]
pub struct PairManifest {
    pub pairs: Vec<Pair>,
    pub split: SplitTag,
    /// Size of the sample set the indices refer to.
    pub samples: usize,
    pub seed: u64,
    pub label_budget: Option<usize>,
}

/// How `split_label_budget` picks the pairs that keep their labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDraw {
    /// `ceil(L/2)` positive and `floor(L/2)` negative pairs.
    #[default]
    Balanced,
    /// `L` pairs uniformly, whatever their relation.
    StrictUniform,
}

fn relation_of(s: &SampleSet, i: usize, j: usize) -> Relation {
    if s.class_ids()[i] == s.class_ids()[j] {
        Relation::Pos
    } else {
        Relation::Neg
    }
}

/// Pairs every sample with one same-class and one different-class partner,
/// each drawn uniformly: `2n` pairs, every sample first exactly twice.
pub fn make_pairs(s: &SampleSet, seed: u64) -> Result<PairManifest> {
    let counts = s.class_counts();
    if counts.len() < 2 {
        return Err(SevenError::invalid(format!(
            "pairing needs at least 2 classes, found {}",
            counts.len()
        )));
    }
    if let Some((class, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(SevenError::invalid(format!(
            "class {class} has a single sample; no positive partner exists"
        )));
    }
    let mut members: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &c) in s.class_ids().iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let n = s.len();
    let mut r = rng::stream(seed, Stream::Pairs);
    let mut pairs = Vec::with_capacity(2 * n);
    for i in 0..n {
        let class = s.class_ids()[i];
        let peers = &members[&class];
        // Uniform over the peers other than i.
        let mut k = r.random_range(0..peers.len() - 1);
        if peers[k] >= i {
            k += 1;
        }
        pairs.push(Pair {
            i,
            j: peers[k],
            relation: Some(Relation::Pos),
        });
        let j = loop {
            let j = r.random_range(0..n);
            if s.class_ids()[j] != class {
                break j;
            }
        };
        pairs.push(Pair {
            i,
            j,
            relation: Some(Relation::Neg),
        });
    }
    Ok(PairManifest {
        pairs,
        split: s.split(),
        samples: n,
        seed,
        label_budget: None,
    })
}

/// Keeps the relation of `budget` labeled pairs and erases the rest. Each
/// erased pair keeps its first sample and gets a partner drawn uniformly
/// from all other samples, without consulting class ids.
pub fn split_label_budget(m: &PairManifest, budget: usize, seed: u64, draw: LabelDraw) -> Result<PairManifest> {
    let labeled: Vec<usize> = (0..m.pairs.len()).filter(|&k| m.pairs[k].relation.is_some()).collect();
    if budget > labeled.len() {
        return Err(SevenError::invalid(format!(
            "label budget {budget} exceeds the {} labeled pairs available",
            labeled.len()
        )));
    }
    if m.samples < 2 {
        return Err(SevenError::invalid("need at least 2 samples to pair"));
    }
    let mut r = rng::stream(seed, Stream::LabelSplit);
    let keep: BTreeSet<usize> = match draw {
        LabelDraw::StrictUniform => index::sample(&mut r, labeled.len(), budget)
            .into_iter()
            .map(|k| labeled[k])
            .collect(),
        LabelDraw::Balanced => {
            let of = |rel| -> Vec<usize> {
                labeled
                    .iter()
                    .copied()
                    .filter(|&k| m.pairs[k].relation == Some(rel))
                    .collect()
            };
            let (pos, neg) = (of(Relation::Pos), of(Relation::Neg));
            let (want_pos, want_neg) = (budget.div_ceil(2), budget / 2);
            if want_pos > pos.len() || want_neg > neg.len() {
                return Err(SevenError::invalid(format!(
                    "balanced budget {budget} needs {want_pos} pos / {want_neg} neg pairs, \
                     have {} / {}",
                    pos.len(),
                    neg.len()
                )));
            }
            let mut keep: BTreeSet<usize> = index::sample(&mut r, pos.len(), want_pos)
                .into_iter()
                .map(|k| pos[k])
                .collect();
            keep.extend(index::sample(&mut r, neg.len(), want_neg).into_iter().map(|k| neg[k]));
            keep
        }
    };
    let pairs = m
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if keep.contains(&k) {
                return *p;
            }
            let mut j = r.random_range(0..m.samples - 1);
            if j >= p.i {
                j += 1;
            }
            Pair {
                i: p.i,
                j,
                relation: None,
            }
        })
        .collect();
    Ok(PairManifest {
        pairs,
        label_budget: Some(budget),
        ..m.clone()
    })
}

/// Seeded split into `(rest, held_out)` with `round(fraction * len)` pairs
/// held out; both parts keep manifest order.
pub fn holdout(m: &PairManifest, fraction: f64, seed: u64) -> Result<(PairManifest, PairManifest)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SevenError::invalid(format!("holdout fraction {fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..m.pairs.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Validation));
    let cut = (fraction * m.pairs.len() as f64).round() as usize;
    let held: BTreeSet<usize> = order[..cut].iter().copied().collect();
    let (mut rest, mut out) = (m.clone(), m.clone());
    rest.pairs = (0..m.pairs.len())
        .filter(|k| !held.contains(k))
        .map(|k| m.pairs[k])
        .collect();
    out.pairs = held.iter().map(|&k| m.pairs[k]).collect();
    Ok((rest, out))
}

/// Errors if any class id occurs in both sets.
pub fn check_class_disjoint(a: &SampleSet, b: &SampleSet) -> Result<()> {
    let ca: BTreeSet<u32> = a.class_ids().iter().copied().collect();
    let shared: Vec<u32> = b
        .class_ids()
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .intersection(&ca)
        .copied()
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(SevenError::invalid(format!(
            "{} classes shared between {} and {} sets, e.g. {:?}",
            shared.len(),
            a.split().as_str(),
            b.split().as_str(),
            &shared[..shared.len().min(5)]
        )))
    }
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labeled(&self) -> usize {
        self.pairs.iter().filter(|p| p.relation.is_some()).count()
    }

    /// Only the labeled pairs.
    pub fn labeled_only(&self) -> PairManifest {
        PairManifest {
            pairs: self.pairs.iter().copied().filter(|p| p.relation.is_some()).collect(),
            ..self.clone()
        }
    }

    /// Checks indices, split agreement and that every labeled relation
    /// matches the class ids of `s`.
    pub fn verify_against(&self, s: &SampleSet) -> Result<()> {
        if self.split != s.split() {
            return Err(SevenError::invalid(format!(
                "manifest built on the {} split used with {} samples",
                self.split.as_str(),
                s.split().as_str()
            )));
        }
        if self.samples != s.len() {
            return Err(SevenError::invalid(format!(
                "manifest indexes {} samples, set has {}",
                self.samples,
                s.len()
            )));
        }
        for (k, p) in self.pairs.iter().enumerate() {
            if p.i >= s.len() || p.j >= s.len() || p.i == p.j {
                return Err(SevenError::invalid(format!("pair {k} ({}, {}) is invalid", p.i, p.j)));
            }
            if let Some(rel) = p.relation {
                if rel != relation_of(s, p.i, p.j) {
                    return Err(SevenError::invalid(format!(
                        "pair {k} ({}, {}) labeled {rel:?} but classes are {} and {}",
                        p.i,
                        p.j,
                        s.class_ids()[p.i],
                        s.class_ids()[p.j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(32 + self.pairs.len() * 16);
        out.push_str("# seven pairs v1\n");
        let _ = writeln!(out, "# split={}", self.split.as_str());
        let _ = writeln!(out, "# samples={}", self.samples);
        let _ = writeln!(out, "# seed={}", self.seed);
        match self.label_budget {
            Some(l) => {
                let _ = writeln!(out, "# label_budget={l}");
            }
            None => out.push_str("# label_budget=none\n"),
        }
        for p in &self.pairs {
            let rel = match p.relation {
                Some(Relation::Pos) => "pos",
                Some(Relation::Neg) => "neg",
                None => "unl",
            };
            let _ = writeln!(out, "{}\t{}\t{rel}", p.i, p.j);
        }
        out
    }

    pub fn from_text(text: &str, context: &str) -> Result<PairManifest> {
        let mut split = None;
        let mut samples = None;
        let mut seed = None;
        let mut label_budget = None;
        let mut pairs = Vec::new();
        let mut offset = 0u64;
        for (lineno, line) in text.lines().enumerate() {
            let start = offset;
            offset += line.len() as u64 + 1;
            let bad = |msg: String| SevenError::format(context, start, format!("line {}: {msg}", lineno + 1));
            if lineno == 0 {
                if line != "# seven pairs v1" {
                    return Err(bad(format!("expected pair manifest header, got {line:?}")));
                }
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta
                    .split_once('=')
                    .ok_or_else(|| bad(format!("malformed header {meta:?}")))?;
                let num = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("{key}: {e}")));
                match key {
                    "split" => split = Some(SplitTag::parse(value).ok_or_else(|| bad(format!("split {value:?}")))?),
                    "samples" => samples = Some(num(value)? as usize),
                    "seed" => seed = Some(num(value)?),
                    "label_budget" => {
                        label_budget = if value == "none" { None } else { Some(num(value)? as usize) }
                    }
                    _ => return Err(bad(format!("unknown header key {key:?}"))),
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [i, j, rel] = fields[..] else {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let idx = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("index {v:?}: {e}")));
            let relation = match rel {
                "pos" => Some(Relation::Pos),
                "neg" => Some(Relation::Neg),
                "unl" => None,
                other => return Err(bad(format!("unknown relation {other:?}"))),
            };
            pairs.push(Pair {
                i: idx(i)?,
                j: idx(j)?,
                relation,
            });
        }
        let missing = |what: &str| SevenError::format(context, 0, format!("header is missing {what}"));
        Ok(PairManifest {
            pairs,
            split: split.ok_or_else(|| missing("split"))?,
            samples: samples.ok_or_else(|| missing("samples"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            label_budget,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| SevenError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<PairManifest> {
        let text = fs::read_to_string(path).map_err(|e| SevenError::io(path, e))?;
        PairManifest::from_text(&text, &path.display().to_string())
    }
}
