//! Random formation of image pairs and groups of three or four.
//!
//! Sampling uses ChaCha8 (`rand_chacha`) seeded from the 64-bit seed in
//! [`SamplingSpec`], so a given `(ids, spec)` yields the same groups on
//! every platform. Groups of one size are unique as unordered sets; member
//! order is the order in which members were drawn.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ImageGroup, ImageRef};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("requested {requested} groups of size {size} but only {feasible} distinct combinations exist")]
    Infeasible {
        size: usize,
        requested: usize,
        feasible: u128,
    },
    #[error("duplicate image id `{0}` in input")]
    DuplicateId(String),
    #[error("empty image id in input")]
    EmptyId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub n_pairs: usize,
    pub n_triples: usize,
    pub n_quads: usize,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn count_for(&self, size: usize) -> usize {
        match size {
            2 => self.n_pairs,
            3 => self.n_triples,
            4 => self.n_quads,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSet {
    pub groups: Vec<ImageGroup>,
    pub spec: SamplingSpec,
}

impl GroupSet {
    pub fn count_of_size(&self, size: usize) -> usize {
        self.groups.iter().filter(|g| g.len() == size).count()
    }
}

/// n choose k, saturating at `u128::MAX`.
pub fn combinations(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Above this many combinations the dense path would need too much memory.
const ENUMERATION_LIMIT: u128 = 2_000_000;

pub fn sample_groups(images: &[ImageRef], spec: SamplingSpec) -> Result<GroupSet, SampleError> {
    let mut seen_ids = HashSet::with_capacity(images.len());
    for img in images {
        if img.id.is_empty() {
            return Err(SampleError::EmptyId);
        }
        if !seen_ids.insert(img.id.as_str()) {
            return Err(SampleError::DuplicateId(img.id.clone()));
        }
    }
    let n = images.len();
    for size in 2..=4 {
        let requested = spec.count_for(size);
        let feasible = combinations(n, size);
        if requested as u128 > feasible {
            return Err(SampleError::Infeasible {
                size,
                requested,
                feasible,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut groups = Vec::with_capacity(spec.n_pairs + spec.n_triples + spec.n_quads);
    for size in 2..=4 {
        let requested = spec.count_for(size);
        if requested == 0 {
            continue;
        }
        let feasible = combinations(n, size);
        let picks = if feasible <= ENUMERATION_LIMIT && (requested as u128) * 2 > feasible {
            sample_dense(n, size, requested, &mut rng)
        } else {
            sample_rejection(n, size, requested, &mut rng)
        };
        groups.extend(picks.into_iter().map(|idx| {
            ImageGroup::new(idx.into_iter().map(|i| images[i].clone()).collect())
                .expect("sampled indices are distinct and sized 2..=4")
        }));
    }
    Ok(GroupSet { groups, spec })
}

fn sample_rejection(n: usize, size: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let drawn = rand::seq::index::sample(rng, n, size).into_vec();
        let mut key = drawn.clone();
        key.sort_unstable();
        if seen.insert(key) {
            out.push(drawn);
        }
    }
    out
}

/// Enumerates every combination, picks `count` of them uniformly, and
/// shuffles member order within each.
fn sample_dense(n: usize, size: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    let mut current = Vec::with_capacity(size);
    enumerate(n, size, 0, &mut current, &mut all);
    let (chosen, _) = all.partial_shuffle(rng, count);
    chosen
        .iter_mut()
        .map(|c| {
            c.shuffle(rng);
            c.clone()
        })
        .collect()
}

fn enumerate(n: usize, size: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if current.len() == size {
        out.push(current.clone());
        return;
    }
    for i in start..n {
        current.push(i);
        enumerate(n, size, i + 1, current, out);
        current.pop();
    }
}
