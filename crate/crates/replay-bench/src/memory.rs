//! Domain types and the fixed-capacity replay memory.
//!
//! The buffer tracks per-class slot indices, the monotone set of full
//! classes, and the stream counters the sampling policies need (per-class
//! `n_c`, and per-cluster `n_c` for the diversity-aware policy).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One labeled example: feature vector, class label, optional sub-label.
///
/// `sub_label` is present exactly when the dataset was produced by class
/// merging or by a synthetic generator with known sub-structure; it names
/// the original class inside a merged class.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Monotonically increasing stream index.
    pub id: u64,
    /// Feature vector with components in [0, 1]; shared, never mutated.
    pub features: Arc<[f32]>,
    /// Merged-class identifier.
    pub label: usize,
    /// Original-class identifier when the class was produced by merging.
    pub sub_label: Option<usize>,
}

impl Instance {
    pub fn new(
        id: u64,
        features: impl Into<Arc<[f32]>>,
        label: usize,
        sub_label: Option<usize>,
    ) -> Self {
        Self {
            id,
            features: features.into(),
            label,
            sub_label,
        }
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Provenance of a batch's instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchOrigin {
    Stream,
    Memory,
    /// Concatenation; records the origins of both parts.
    Concatenated(Vec<BatchOrigin>),
}

/// An ordered group of instances with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub instances: Vec<Instance>,
    pub origin: BatchOrigin,
}

impl Batch {
    pub fn new(instances: Vec<Instance>, origin: BatchOrigin) -> Self {
        Self { instances, origin }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Concatenates two batches, recording both origins.
    pub fn concat(a: Batch, b: Batch) -> Batch {
        let origin = BatchOrigin::Concatenated(vec![a.origin, b.origin]);
        let mut instances = a.instances;
        instances.extend(b.instances);
        Batch { instances, origin }
    }
}

/// Fixed-capacity slot store with class bookkeeping.
///
/// Slot ids are stable integers in `[0, capacity)`; eviction reuses the
/// victim's slot, so memory layout is deterministic under a fixed seed.
/// Capacity 0 is permitted and degenerates to an always-empty memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    slots: Vec<Option<Instance>>,
    occupancy: usize,
    next_free: usize,
    class_index: BTreeMap<usize, BTreeSet<usize>>,
    full_classes: BTreeSet<usize>,
    stream_counts: BTreeMap<usize, u64>,
    cluster_stream_counts: BTreeMap<(usize, usize), u64>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: vec![None; capacity],
            occupancy: 0,
            next_free: 0,
            class_index: BTreeMap::new(),
            full_classes: BTreeSet::new(),
            stream_counts: BTreeMap::new(),
            cluster_stream_counts: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    /// True iff every slot is occupied (vacuously true at capacity 0).
    pub fn is_filled(&self) -> bool {
        self.occupancy == self.capacity
    }

    pub fn get(&self, slot: usize) -> Option<&Instance> {
        self.slots.get(slot).and_then(|s| s.as_ref())
    }

    /// Occupied slot ids of one class, ascending.
    pub fn slots_of(&self, label: usize) -> Vec<usize> {
        self.class_index
            .get(&label)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// In-memory instance count of one class (`m_c` at class granularity).
    pub fn class_count(&self, label: usize) -> usize {
        self.class_index.get(&label).map_or(0, BTreeSet::len)
    }

    /// All per-class in-memory counts, ascending by label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.class_index
            .iter()
            .map(|(&l, s)| (l, s.len()))
            .filter(|&(_, n)| n > 0)
            .collect()
    }

    /// Labels marked full so far; the set only ever grows.
    pub fn full_classes(&self) -> &BTreeSet<usize> {
        &self.full_classes
    }

    /// Stream count of one label (`n_c` at class granularity).
    pub fn stream_count(&self, label: usize) -> u64 {
        self.stream_counts.get(&label).copied().unwrap_or(0)
    }

    /// Records one observed arrival of `label`; returns the new count.
    pub fn note_observation(&mut self, label: usize) -> u64 {
        let c = self.stream_counts.entry(label).or_insert(0);
        *c += 1;
        *c
    }

    /// Cluster-granular stream count (`n_c`); the key is a k-means cluster
    /// id or a sub-label, depending on the clusterer that owns it.
    pub fn cluster_stream_count(&self, label: usize, cluster: usize) -> Option<u64> {
        self.cluster_stream_counts.get(&(label, cluster)).copied()
    }

    /// Increments a cluster-granular counter; returns the new count.
    pub fn bump_cluster_stream_count(&mut self, label: usize, cluster: usize) -> u64 {
        let c = self.cluster_stream_counts.entry((label, cluster)).or_insert(0);
        *c += 1;
        *c
    }

    /// Overwrites a cluster-granular counter (re-seeding after a re-fit).
    pub fn set_cluster_stream_count(&mut self, label: usize, cluster: usize, value: u64) {
        self.cluster_stream_counts.insert((label, cluster), value);
    }

    /// Drops every cluster counter of `label` (precedes re-seeding).
    pub fn clear_cluster_stream_counts(&mut self, label: usize) {
        self.cluster_stream_counts
            .retain(|&(l, _), _| l != label);
    }

    /// Stores an instance in the lowest free slot.
    pub fn insert(&mut self, instance: Instance) -> Result<usize> {
        if self.is_filled() {
            return Err(Error::BufferFull {
                capacity: self.capacity,
            });
        }
        // The fill phase never frees slots, so the lowest free slot is a
        // running cursor; replace() reuses slots and keeps the buffer full.
        while self.slots[self.next_free].is_some() {
            self.next_free += 1;
        }
        let slot = self.next_free;
        self.class_index
            .entry(instance.label)
            .or_default()
            .insert(slot);
        self.slots[slot] = Some(instance);
        self.occupancy += 1;
        Ok(slot)
    }

    /// Replaces the instance in `victim_slot`, returning the evicted one.
    /// Occupancy is unchanged; class indices are updated for both labels.
    pub fn replace(&mut self, victim_slot: usize, incoming: Instance) -> Result<Instance> {
        if victim_slot >= self.capacity {
            return Err(Error::SlotOutOfRange {
                slot: victim_slot,
                capacity: self.capacity,
            });
        }
        let evicted = self.slots[victim_slot]
            .take()
            .ok_or(Error::SlotUnoccupied { slot: victim_slot })?;
        if let Some(set) = self.class_index.get_mut(&evicted.label) {
            set.remove(&victim_slot);
            if set.is_empty() {
                self.class_index.remove(&evicted.label);
            }
        }
        self.class_index
            .entry(incoming.label)
            .or_default()
            .insert(victim_slot);
        self.slots[victim_slot] = Some(incoming);
        Ok(evicted)
    }

    /// Marks every label whose in-memory count equals the current maximum
    /// as full; ties all become full together. Returns the newly added set.
    ///
    /// # Errors
    /// Returns [`Error::NotFilled`] when called before the buffer fills;
    /// stage-2 policy code must not run earlier.
    pub fn update_full_classes(&mut self) -> Result<BTreeSet<usize>> {
        if !self.is_filled() {
            return Err(Error::NotFilled {
                occupancy: self.occupancy,
                capacity: self.capacity,
            });
        }
        let max = self
            .class_index
            .values()
            .map(BTreeSet::len)
            .max()
            .unwrap_or(0);
        let mut newly = BTreeSet::new();
        for (&label, slots) in &self.class_index {
            if slots.len() == max && !self.full_classes.contains(&label) {
                newly.insert(label);
            }
        }
        self.full_classes.extend(newly.iter().copied());
        Ok(newly)
    }

    /// Draws `min(k, occupancy)` distinct instances uniformly without
    /// replacement; an empty memory yields an empty batch.
    pub fn sample_replay_batch(&self, k: usize, rng: &mut ChaCha8Rng) -> Batch {
        let occupied: Vec<usize> = self.occupied_slots().collect();
        let take = k.min(occupied.len());
        let picked = rand::seq::index::sample(rng, occupied.len(), take);
        let instances = picked
            .iter()
            .map(|i| self.slots[occupied[i]].clone().expect("occupied slot"))
            .collect();
        Batch::new(instances, BatchOrigin::Memory)
    }

    /// Ascending ids of occupied slots.
    pub fn occupied_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|_| i))
    }

    /// All stored instances in slot order.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.slots.iter().filter_map(Option::as_ref)
    }

    /// Checks the class-index partition invariant; used by tests and debug
    /// assertions after every mutation.
    pub fn check_invariants(&self) -> Result<()> {
        let indexed: usize = self.class_index.values().map(BTreeSet::len).sum();
        if indexed != self.occupancy {
            return Err(Error::InvalidSpec(format!(
                "class index covers {indexed} slots but occupancy is {}",
                self.occupancy
            )));
        }
        for (&label, slots) in &self.class_index {
            for &slot in slots {
                match self.get(slot) {
                    Some(inst) if inst.label == label => {}
                    _ => {
                        return Err(Error::InvalidSpec(format!(
                            "slot {slot} not an instance of class {label}"
                        )))
                    }
                }
            }
        }
        for (&label, slots) in &self.class_index {
            if (self.stream_counts.get(&label).copied().unwrap_or(0) as usize) < slots.len() {
                return Err(Error::InvalidSpec(format!(
                    "stream count of class {label} below its in-memory count"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn inst(id: u64, label: usize) -> Instance {
        Instance::new(id, vec![0.5f32], label, None)
    }

    fn filled_buffer(capacity: usize, labels: &[usize]) -> MemoryBuffer {
        let mut buf = MemoryBuffer::new(capacity);
        for (i, &l) in labels.iter().enumerate() {
            buf.note_observation(l);
            buf.insert(inst(i as u64, l)).unwrap();
        }
        buf
    }

    #[test]
    fn is_filled_tracks_occupancy() {
        let mut buf = MemoryBuffer::new(2);
        assert!(!buf.is_filled());
        buf.insert(inst(0, 0)).unwrap();
        assert!(!buf.is_filled());
        buf.insert(inst(1, 0)).unwrap();
        assert!(buf.is_filled());
    }

    #[test]
    fn zero_capacity_is_vacuously_full() {
        let buf = MemoryBuffer::new(0);
        assert!(buf.is_filled());
        assert_eq!(buf.occupancy(), 0);
    }

    #[test]
    fn insert_rejects_when_full() {
        let mut buf = filled_buffer(1, &[0]);
        assert!(matches!(
            buf.insert(inst(9, 0)),
            Err(Error::BufferFull { .. })
        ));
    }

    #[test]
    fn update_full_classes_unique_maximum() {
        let mut labels = vec![0; 300];
        labels.extend(vec![1; 200]);
        let mut buf = filled_buffer(500, &labels);
        let newly = buf.update_full_classes().unwrap();
        assert_eq!(newly.into_iter().collect::<Vec<_>>(), vec![0]);
        assert_eq!(buf.full_classes().len(), 1);
    }

    #[test]
    fn update_full_classes_marks_all_tied_maxima() {
        let mut labels = vec![0; 250];
        labels.extend(vec![1; 250]);
        let mut buf = filled_buffer(500, &labels);
        let newly = buf.update_full_classes().unwrap();
        assert_eq!(newly.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn update_full_classes_is_idempotent_for_marked_classes() {
        let mut labels = vec![0; 100];
        labels.extend(vec![1; 400]);
        let mut buf = filled_buffer(500, &labels);
        assert_eq!(buf.update_full_classes().unwrap().len(), 1);
        let again = buf.update_full_classes().unwrap();
        assert!(again.is_empty());
        assert!(buf.full_classes().contains(&1));
    }

    #[test]
    fn update_full_classes_requires_filled_buffer() {
        let mut buf = MemoryBuffer::new(3);
        buf.insert(inst(0, 0)).unwrap();
        assert!(matches!(
            buf.update_full_classes(),
            Err(Error::NotFilled { .. })
        ));
    }

    #[test]
    fn full_classes_never_shrink() {
        let mut labels = vec![0; 3];
        labels.extend(vec![1; 2]);
        let mut buf = filled_buffer(5, &labels);
        buf.update_full_classes().unwrap();
        assert!(buf.full_classes().contains(&0));
        // Evict class 0 below class 1; the mark must persist.
        let slot = buf.slots_of(0)[0];
        buf.note_observation(1);
        buf.replace(slot, inst(10, 1)).unwrap();
        let slot = buf.slots_of(0)[0];
        buf.note_observation(1);
        buf.replace(slot, inst(11, 1)).unwrap();
        buf.update_full_classes().unwrap();
        assert!(buf.full_classes().contains(&0));
        assert!(buf.full_classes().contains(&1));
    }

    #[test]
    fn replace_updates_both_class_indices() {
        let mut buf = filled_buffer(2, &[0, 0]);
        let evicted = buf.replace(0, inst(5, 1)).unwrap();
        assert_eq!(evicted.label, 0);
        assert_eq!(buf.class_count(0), 1);
        assert_eq!(buf.class_count(1), 1);
        assert_eq!(buf.occupancy(), 2);
        buf.check_invariants().unwrap_err(); // stream count of class 1 is 0
    }

    #[test]
    fn replace_same_class_keeps_counts() {
        let mut buf = filled_buffer(2, &[0, 0]);
        buf.note_observation(0);
        buf.replace(1, inst(5, 0)).unwrap();
        assert_eq!(buf.class_count(0), 2);
        buf.check_invariants().unwrap();
    }

    #[test]
    fn replace_rejects_bad_slots() {
        let mut buf = filled_buffer(2, &[0, 0]);
        assert!(matches!(
            buf.replace(2, inst(5, 1)),
            Err(Error::SlotOutOfRange { .. })
        ));
        let mut sparse = MemoryBuffer::new(2);
        sparse.insert(inst(0, 0)).unwrap();
        assert!(matches!(
            sparse.replace(1, inst(5, 1)),
            Err(Error::SlotUnoccupied { .. })
        ));
    }

    #[test]
    fn sample_replay_batch_clamps_and_dedups() {
        let buf = filled_buffer(3, &[0, 1, 2]);
        let mut rng = rng_from(1);
        let batch = buf.sample_replay_batch(10, &mut rng);
        assert_eq!(batch.len(), 3);
        let mut ids: Vec<u64> = batch.instances.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 3);
        assert_eq!(batch.origin, BatchOrigin::Memory);
    }

    #[test]
    fn sample_replay_batch_from_empty_memory_is_empty() {
        let buf = MemoryBuffer::new(4);
        let mut rng = rng_from(1);
        assert!(buf.sample_replay_batch(10, &mut rng).is_empty());
    }

    #[test]
    fn sample_replay_batch_exact_size() {
        let labels: Vec<usize> = (0..500).map(|i| i % 5).collect();
        let buf = filled_buffer(500, &labels);
        let mut rng = rng_from(2);
        assert_eq!(buf.sample_replay_batch(10, &mut rng).len(), 10);
    }

    #[test]
    fn replay_sampling_is_uniform_over_slots() {
        // Chi-square goodness of fit on slot frequencies over 10,000 draws
        // of size 10 from a 500-slot buffer, significance 0.01.
        let labels: Vec<usize> = (0..500).map(|i| i % 5).collect();
        let buf = filled_buffer(500, &labels);
        let mut rng = rng_from(3);
        let mut hits = vec![0u64; 500];
        let draws = 10_000;
        for _ in 0..draws {
            for i in buf.sample_replay_batch(10, &mut rng).instances {
                hits[i.id as usize] += 1;
            }
        }
        let expected = (draws * 10) as f64 / 500.0;
        let stat: f64 = hits
            .iter()
            .map(|&h| {
                let d = h as f64 - expected;
                d * d / expected
            })
            .sum();
        // 0.99 quantile of chi-square with 499 degrees of freedom.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cutoff = ChiSquared::new(499.0).unwrap().inverse_cdf(0.99);
        assert!(
            stat < cutoff,
            "chi-square {stat:.1} exceeds 0.99 quantile {cutoff:.1}"
        );
    }

    #[test]
    fn batch_concat_records_both_origins() {
        let a = Batch::new(vec![inst(0, 0)], BatchOrigin::Stream);
        let b = Batch::new(vec![inst(1, 1)], BatchOrigin::Memory);
        let c = Batch::concat(a, b);
        assert_eq!(c.len(), 2);
        assert_eq!(
            c.origin,
            BatchOrigin::Concatenated(vec![BatchOrigin::Stream, BatchOrigin::Memory])
        );
    }

    #[test]
    fn class_counts_sum_to_occupancy_under_mutation() {
        let mut buf = filled_buffer(8, &[0, 0, 1, 1, 2, 2, 3, 3]);
        let mut rng = rng_from(4);
        for step in 0..200u64 {
            use rand::Rng;
            let slot = rng.random_range(0..8);
            let label = rng.random_range(0..5);
            buf.note_observation(label);
            buf.replace(slot, inst(100 + step, label)).unwrap();
            let total: usize = buf.class_counts().values().sum();
            assert_eq!(total, buf.occupancy());
            buf.check_invariants().unwrap();
        }
    }
}
