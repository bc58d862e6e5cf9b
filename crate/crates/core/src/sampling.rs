//! Seeded construction of the index sets the relational and triplet
//! losses consume: random pairs, random triplets, and anchor/negative
//! pairs whose negative carries a different teacher-assigned class.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a negative is picked among the valid candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    #[default]
    Random,
    /// Most violating candidate: minimal teacher-anchor to
    /// student-negative distance.
    Hardest,
}

/// Which class assignment separates anchors from negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeBy {
    /// Class = argmax of the teacher's output row (the soft target).
    #[default]
    TeacherArgmax,
    GroundTruth,
}

/// Per-batch index-set sizes and the negative-mining policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Pairs per batch for the relational distance term; `None` means one
    /// pair per batch row.
    #[serde(default)]
    pub pairs: Option<usize>,
    /// Triples per batch for the relational angle term; `None` means one
    /// triple per batch row.
    #[serde(default)]
    pub triplets: Option<usize>,
    /// Negatives drawn for each anchor of the triplet distillation term.
    #[serde(default = "default_per_anchor")]
    pub per_anchor: usize,
    #[serde(default)]
    pub strategy: NegativeStrategy,
    #[serde(default)]
    pub negative_by: NegativeBy,
}

fn default_per_anchor() -> usize {
    1
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            pairs: None,
            triplets: None,
            per_anchor: 1,
            strategy: NegativeStrategy::Random,
            negative_by: NegativeBy::TeacherArgmax,
        }
    }
}

impl SamplingConfig {
    /// All violations, one message per offending field.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.per_anchor == 0 {
            v.push(format!("{}per_anchor: must be >= 1", prefix));
        }
        if self.pairs == Some(0) {
            v.push(format!("{}pairs: must be >= 1 when set", prefix));
        }
        if self.triplets == Some(0) {
            v.push(format!("{}triplets: must be >= 1 when set", prefix));
        }
        v
    }
}

/// `count` distinct unordered index pairs from a batch, in draw order.
/// A count beyond the n·(n−1)/2 available pairs is truncated with a
/// warning.
pub fn sample_pairs(
    batch_size: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    if batch_size < 2 {
        return Err(Error::Contract(format!(
            "pair sampling needs a batch of at least 2, got {}",
            batch_size
        )));
    }
    let available = batch_size * (batch_size - 1) / 2;
    let want = if count > available {
        log::warn!(
            "requested {} pairs but a batch of {} only has {}; truncating",
            count,
            batch_size,
            available
        );
        available
    } else {
        count
    };
    let mut seen = HashSet::with_capacity(want);
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let i = rng.gen_range(0..batch_size);
        let j = rng.gen_range(0..batch_size);
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if seen.insert(key) {
            out.push(key);
        }
    }
    Ok(out)
}

/// `count` index triples with pairwise-distinct members and no repeated
/// ordered triple, in draw order. Truncates like `sample_pairs`.
pub fn sample_triplets(
    batch_size: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    if batch_size < 3 {
        return Err(Error::Contract(format!(
            "triplet sampling needs a batch of at least 3, got {}",
            batch_size
        )));
    }
    let available = batch_size * (batch_size - 1) * (batch_size - 2);
    let want = if count > available {
        log::warn!(
            "requested {} triplets but a batch of {} only has {}; truncating",
            count,
            batch_size,
            available
        );
        available
    } else {
        count
    };
    let mut seen = HashSet::with_capacity(want);
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let i = rng.gen_range(0..batch_size);
        let j = rng.gen_range(0..batch_size);
        let k = rng.gen_range(0..batch_size);
        if i == j || j == k || i == k {
            continue;
        }
        if seen.insert((i, j, k)) {
            out.push((i, j, k));
        }
    }
    Ok(out)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Anchor/negative pairs for the triplet distillation loss: every batch
/// row anchors `per_anchor` negatives drawn from rows whose class (per
/// `by`) differs. Anchors without a valid negative contribute nothing;
/// a single-class batch yields an empty set.
///
/// The `hardest` strategy needs the student logits to rank candidates;
/// `labels` is needed only for ground-truth class assignment.
pub fn sample_kd_negatives(
    teacher_logits: &Tensor,
    student_logits: Option<&Tensor>,
    labels: Option<&[usize]>,
    per_anchor: usize,
    strategy: NegativeStrategy,
    by: NegativeBy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let shape = teacher_logits.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "teacher logits must be [N,K], got {:?}",
            shape
        )));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Contract(format!(
            "negative sampling needs a batch of at least 2, got {}",
            n
        )));
    }

    let classes: Vec<usize> = match by {
        NegativeBy::TeacherArgmax => (0..n)
            .map(|i| crate::tensor::argmax_slice(teacher_logits.row(i).data()))
            .collect(),
        NegativeBy::GroundTruth => labels
            .ok_or_else(|| {
                Error::Contract("ground-truth negative sampling needs batch labels".into())
            })?
            .to_vec(),
    };
    if classes.len() != n {
        return Err(Error::Contract(format!(
            "{} class assignments for a batch of {}",
            classes.len(),
            n
        )));
    }

    let student = match strategy {
        NegativeStrategy::Hardest => Some(student_logits.ok_or_else(|| {
            Error::Contract("hardest negative mining needs student logits".into())
        })?),
        NegativeStrategy::Random => None,
    };

    let mut out = Vec::new();
    for a in 0..n {
        let mut candidates: Vec<usize> = (0..n).filter(|&c| classes[c] != classes[a]).collect();
        if candidates.is_empty() {
            continue;
        }
        let take = per_anchor.min(candidates.len());
        match strategy {
            NegativeStrategy::Random => {
                // Partial Fisher-Yates: the first `take` slots are a
                // uniform draw without replacement.
                for slot in 0..take {
                    let pick = slot + rng.gen_range(0..candidates.len() - slot);
                    candidates.swap(slot, pick);
                    out.push((a, candidates[slot]));
                }
            }
            NegativeStrategy::Hardest => {
                let t_anchor = teacher_logits.row(a);
                let s = student.unwrap();
                let mut ranked: Vec<(f64, usize)> = candidates
                    .iter()
                    .map(|&c| (squared_distance(t_anchor.data(), s.row(c).data()), c))
                    .collect();
                ranked.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
                for &(_, c) in ranked.iter().take(take) {
                    out.push((a, c));
                }
            }
        }
    }
    Ok(out)
}
