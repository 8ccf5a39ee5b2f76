//! Batch construction: plain uniform sampling and group-balanced
//! oversampling (uniform with replacement inside each group).

use super::MitigationError;
use crate::Group;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Indices of one batch and the group of each index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub group_of: Vec<Group>,
}

impl BatchPlan {
    pub fn count(&self, group: &Group) -> usize {
        self.group_of.iter().filter(|g| *g == group).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Plain,
    Oversample,
}

/// Dataset indices bucketed by group, groups in sorted order.
#[derive(Debug, Clone)]
pub struct GroupIndex {
    groups: Vec<Group>,
    members: Vec<Vec<usize>>,
}

impl GroupIndex {
    pub fn new(group_of_item: &[Group]) -> Self {
        let mut groups: Vec<Group> = group_of_item.to_vec();
        groups.sort();
        groups.dedup();
        let mut members = vec![Vec::new(); groups.len()];
        for (i, g) in group_of_item.iter().enumerate() {
            let k = groups.binary_search(g).expect("group collected above");
            members[k].push(i);
        }
        GroupIndex { groups, members }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[k]
    }
}

/// Group-aware batch sampler.
///
/// `level` interpolates each group's per-batch share between its natural
/// frequency (`0.0`) and an equal share (`1.0`, full balance). Slot counts are
/// rounded by largest remainder; remainder ties rotate across successive
/// batches so no group is favoured in the long run.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    index: GroupIndex,
    batch_size: usize,
    shares: Vec<f64>,
    batches_issued: usize,
}

impl BalancedSampler {
    pub fn new(index: GroupIndex, batch_size: usize, level: f64) -> Result<Self, MitigationError> {
        if index.groups.is_empty() {
            return Err(MitigationError::EmptyGrouping);
        }
        if let Some(k) = index.members.iter().position(Vec::is_empty) {
            return Err(MitigationError::EmptyGroup(index.groups[k].clone()));
        }
        let n_groups = index.groups.len();
        if batch_size < n_groups {
            return Err(MitigationError::BatchTooSmall {
                batch_size,
                groups: n_groups,
            });
        }
        if !(0.0..=1.0).contains(&level) {
            return Err(MitigationError::InvalidLevel(level));
        }
        let total = index.len() as f64;
        let shares = index
            .members
            .iter()
            .map(|m| (1.0 - level) * m.len() as f64 / total + level / n_groups as f64)
            .collect();
        Ok(BalancedSampler {
            index,
            batch_size,
            shares,
            batches_issued: 0,
        })
    }

    /// Per-group slot counts of the next batch, without drawing.
    fn slot_counts(&self) -> Vec<usize> {
        let n = self.shares.len();
        let expected: Vec<f64> = self.shares.iter().map(|s| s * self.batch_size as f64).collect();
        let mut counts: Vec<usize> = expected.iter().map(|e| (e + 1e-9).floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let remainder = self.batch_size.saturating_sub(assigned);
        if remainder > 0 {
            let offset = (self.batches_issued * remainder) % n;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let fa = expected[a] - counts[a] as f64;
                let fb = expected[b] - counts[b] as f64;
                let ra = (a + n - offset) % n;
                let rb = (b + n - offset) % n;
                // Fractions equal up to rounding noise count as ties.
                if (fa - fb).abs() > 1e-9 {
                    fb.partial_cmp(&fa).expect("finite")
                } else {
                    ra.cmp(&rb)
                }
            });
            for &k in order.iter().take(remainder) {
                counts[k] += 1;
            }
        }
        counts
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> BatchPlan {
        let counts = self.slot_counts();
        self.batches_issued += 1;
        let mut indices = Vec::with_capacity(self.batch_size);
        let mut group_of = Vec::with_capacity(self.batch_size);
        for (k, &c) in counts.iter().enumerate() {
            let members = &self.index.members[k];
            for _ in 0..c {
                indices.push(members[rng.random_range(0..members.len())]);
                group_of.push(self.index.groups[k].clone());
            }
        }
        BatchPlan { indices, group_of }
    }
}

/// One fully balanced batch (the first batch of a fresh [`BalancedSampler`]).
pub fn balanced_batch_indices<R: Rng + ?Sized>(
    group_of_item: &[Group],
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchPlan, MitigationError> {
    let mut sampler = BalancedSampler::new(GroupIndex::new(group_of_item), batch_size, 1.0)?;
    Ok(sampler.next_batch(rng))
}

/// Uniform sampling with replacement over the whole dataset.
pub fn plain_batch_indices<R: Rng + ?Sized>(group_of_item: &[Group], batch_size: usize, rng: &mut R) -> BatchPlan {
    let indices: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..group_of_item.len()))
        .collect();
    let group_of = indices.iter().map(|&i| group_of_item[i].clone()).collect();
    BatchPlan { indices, group_of }
}
