//! Modality-consistent batch scheduling.
//!
//! Samples are grouped by `(dataset identifier, availability)`, each group
//! is padded to a multiple of the batch size with random duplicates drawn
//! from the same group, groups are shuffled and cut into batches, and the
//! batch list is shuffled once more. Every batch therefore carries a single
//! key, so the network can route the whole batch through one set of
//! streams.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::datamodel::{ModalityMask, MultiModalSample};
use crate::error::{Error, Result};
use crate::seed::{derive_seed_indexed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct GroupKey {
    pub dataset_id: usize,
    pub availability: ModalityMask,
}

impl GroupKey {
    pub fn of(sample: &MultiModalSample) -> Self {
        GroupKey {
            dataset_id: sample.dataset_id,
            availability: sample.availability,
        }
    }
}

/// Position of a sample in the canonical corpus enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SampleRef(pub usize);

pub type Groups = BTreeMap<GroupKey, Vec<SampleRef>>;

/// Partitions `(reference, key)` pairs. Members are kept in reference
/// order, so the grouping does not depend on input order.
pub fn group_refs(items: impl IntoIterator<Item = (SampleRef, GroupKey)>) -> Groups {
    let mut groups = Groups::new();
    for (r, key) in items {
        groups.entry(key).or_default().push(r);
    }
    for members in groups.values_mut() {
        members.sort_unstable();
    }
    groups
}

/// Groups samples by key; references are slice positions.
pub fn group_samples(samples: &[MultiModalSample]) -> Groups {
    group_refs(
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| (SampleRef(i), GroupKey::of(s))),
    )
}

/// Appends uniform draws (with replacement) from `group` until its length
/// is the smallest multiple of `batch_size`.
pub fn pad_group(group: &[SampleRef], batch_size: usize, rng: &mut Rng) -> Result<Vec<SampleRef>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if group.is_empty() {
        return Err(Error::Config("cannot pad an empty group".into()));
    }
    let target = group.len().div_ceil(batch_size) * batch_size;
    let mut padded = group.to_vec();
    while padded.len() < target {
        padded.push(group[rng.random_range(0..group.len())]);
    }
    Ok(padded)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Batch {
    pub key: GroupKey,
    pub members: Vec<SampleRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub batch_size: usize,
    pub epoch_seed: u64,
}

/// Seed of epoch `epoch` under `global_seed`.
pub fn epoch_seed(global_seed: u64, epoch: usize) -> u64 {
    derive_seed_indexed(global_seed, "epoch", &[epoch as u64])
}

pub fn build_epoch_plan(groups: &Groups, batch_size: usize, epoch_seed: u64) -> Result<BatchPlan> {
    if groups.is_empty() {
        return Err(Error::Config("no sample groups to schedule".into()));
    }
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut rng = Rng::seed_from_u64(epoch_seed);
    let mut batches = Vec::new();
    for (key, members) in groups {
        let mut padded = pad_group(members, batch_size, &mut rng)?;
        padded.shuffle(&mut rng);
        batches.extend(padded.chunks_exact(batch_size).map(|chunk| Batch {
            key: *key,
            members: chunk.to_vec(),
        }));
    }
    batches.shuffle(&mut rng);
    Ok(BatchPlan {
        batches,
        batch_size,
        epoch_seed,
    })
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Lists every violated plan invariant against the groups it came from.
    pub fn check(&self, groups: &Groups) -> Vec<String> {
        let mut problems = Vec::new();
        let mut key_of = BTreeMap::new();
        for (k, members) in groups {
            for r in members {
                key_of.insert(*r, *k);
            }
        }
        let mut batches_per_group: BTreeMap<GroupKey, usize> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, b) in self.batches.iter().enumerate() {
            if b.members.len() != self.batch_size {
                problems.push(format!("batch {i} has {} members", b.members.len()));
            }
            for r in &b.members {
                match key_of.get(r) {
                    Some(k) if *k == b.key => {}
                    Some(k) => problems.push(format!("batch {i}: {r:?} belongs to {k:?}")),
                    None => problems.push(format!("batch {i}: unknown {r:?}")),
                }
                seen.insert(*r);
            }
            *batches_per_group.entry(b.key).or_default() += 1;
        }
        for (k, members) in groups {
            let expected = members.len().div_ceil(self.batch_size);
            let got = batches_per_group.get(k).copied().unwrap_or(0);
            if got != expected {
                problems.push(format!("group {k:?}: {got} batches, expected {expected}"));
            }
            let padding = got * self.batch_size - members.len().min(got * self.batch_size);
            if padding >= self.batch_size {
                problems.push(format!("group {k:?}: {padding} padding duplicates"));
            }
            if let Some(r) = members.iter().find(|r| !seen.contains(r)) {
                problems.push(format!("{r:?} missing from plan"));
            }
        }
        problems
    }

    /// One line per batch: `epoch,batch_idx,dataset_id,availability_bits,sample_ids...`.
    pub fn write_csv<W: Write + ?Sized>(&self, epoch: usize, out: &mut W) -> std::io::Result<()> {
        for (i, b) in self.batches.iter().enumerate() {
            write!(out, "{epoch},{i},{},{}", b.key.dataset_id, b.key.availability)?;
            for r in &b.members {
                write!(out, ",{}", r.0)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::make_mask;
    use crate::seed::stream;

    fn key(dataset_id: usize, names: &[&str]) -> GroupKey {
        GroupKey {
            dataset_id,
            availability: make_mask(names).unwrap(),
        }
    }

    fn refs(n: usize) -> Vec<SampleRef> {
        (0..n).map(SampleRef).collect()
    }

    #[test]
    fn dataset_id_participates_in_the_key() {
        let groups = group_refs([
            (SampleRef(0), key(0, &["T1", "T2"])),
            (SampleRef(1), key(0, &["T1", "T2"])),
            (SampleRef(2), key(1, &["T1", "T2"])),
        ]);
        let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 1]);

        let one = group_refs((0..5).map(|i| (SampleRef(i), key(2, &["FLAIR", "ADC"]))));
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn padding_reaches_next_multiple() {
        let mut rng = stream(0, "pad");
        let p = pad_group(&refs(5), 2, &mut rng).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(&p[..5], &refs(5)[..]);
        assert!(p[5].0 < 5);

        assert_eq!(pad_group(&refs(4), 2, &mut rng).unwrap(), refs(4));

        let single = pad_group(&[SampleRef(9)], 4, &mut rng).unwrap();
        assert_eq!(single, vec![SampleRef(9); 4]);

        assert!(matches!(pad_group(&refs(3), 0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn plan_counts_and_determinism() {
        let mut items: Vec<_> = (0..6).map(|i| (SampleRef(i), key(0, &["T1", "T2"]))).collect();
        items.extend((6..10).map(|i| (SampleRef(i), key(1, &["T1", "T2"]))));
        let groups = group_refs(items);
        let plan = build_epoch_plan(&groups, 2, 11).unwrap();
        assert_eq!(plan.len(), 5);
        assert!(plan.check(&groups).is_empty());
        assert_eq!(plan, build_epoch_plan(&groups, 2, 11).unwrap());
        assert!(matches!(
            build_epoch_plan(&Groups::new(), 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distinct_seeds_reorder_but_keep_group_counts() {
        let groups = group_refs((0..23).map(|i| (SampleRef(i), key(i % 3, &["T1", "FLAIR"]))));
        let counts = |p: &BatchPlan| {
            let mut m = BTreeMap::new();
            for b in &p.batches {
                *m.entry(b.key).or_insert(0usize) += 1;
            }
            m
        };
        let mut differing = 0;
        for s in 0..10u64 {
            let a = build_epoch_plan(&groups, 3, epoch_seed(1, 2 * s as usize)).unwrap();
            let b = build_epoch_plan(&groups, 3, epoch_seed(1, 2 * s as usize + 1)).unwrap();
            assert_eq!(counts(&a), counts(&b));
            if a.batches != b.batches {
                differing += 1;
            }
        }
        assert_eq!(differing, 10);
    }

    #[test]
    fn plan_dump_format() {
        let groups = group_refs([(SampleRef(0), key(1, &["T1", "T2"])), (SampleRef(1), key(1, &["T1", "T2"]))]);
        let plan = build_epoch_plan(&groups, 2, 3).unwrap();
        let mut out = Vec::new();
        plan.write_csv(4, &mut out).unwrap();
        let line = String::from_utf8(out).unwrap();
        assert!(line.starts_with("4,0,1,110000,"), "{line}");
        assert_eq!(line.trim().split(',').count(), 6);
    }
}
