//! The three memory-management policies behind one observe-one-instance
//! contract: reservoir sampling, class-balancing reservoir sampling
//! (CBRS), and diversity-aware CBRS (D-CBRS).
//!
//! All policies share the two-stage shape: until the memory fills, every
//! arrival is stored; afterwards each arrival either replaces a stored
//! instance or is rejected. CBRS evicts only from classes marked full;
//! D-CBRS additionally clusters class contents and evicts from the largest
//! cluster, which preserves minority sub-populations.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{
    assign, kmeans_fit_restarts, largest_cluster, oracle_cluster, Clustering,
    DEFAULT_KMEANS_RESTARTS,
};
use crate::error::{Error, Result};
use crate::memory::{Instance, MemoryBuffer};
use crate::rng::{rng_from, substream};

/// How D-CBRS clusters a class's in-memory instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClustererKind {
    /// Seeded k-means on feature vectors.
    KMeans,
    /// True sub-label partition; requires every instance to carry one.
    Oracle,
}

/// Which policy handles observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Reservoir,
    Cbrs,
    Dcbrs { clusterer: ClustererKind },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Reservoir => "reservoir",
            PolicyKind::Cbrs => "cbrs",
            PolicyKind::Dcbrs { .. } => "dcbrs",
        }
    }
}

/// D-CBRS clustering configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcbrsParams {
    /// Clusters per class for the k-means clusterer.
    pub clusters_per_class: usize,
    /// Re-cluster a class after this many uses of its clustering; 1 means
    /// a fresh fit on every use (the reference configuration).
    pub refresh_interval: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Seedings per fit; the lowest final inertia wins.
    pub kmeans_restarts: usize,
}

impl Default for DcbrsParams {
    fn default() -> Self {
        Self {
            clusters_per_class: 2,
            refresh_interval: 1,
            kmeans_max_iters: 50,
            kmeans_tol: 1e-4,
            kmeans_restarts: DEFAULT_KMEANS_RESTARTS,
        }
    }
}

/// Outcome of one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoryEvent {
    Stored { slot: usize },
    Replaced { slot: usize, evicted: Instance },
    Rejected,
}

/// One D-CBRS eviction, recorded when auditing is enabled: the victim must
/// come from a largest cluster of its class at eviction time.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionAudit {
    pub victim_slot: usize,
    pub victim_label: usize,
    pub victim_cluster: usize,
    pub cluster_sizes: Vec<usize>,
}

/// Cached k-means clustering of one class's memory contents. `slots[i]`
/// is the buffer slot of the instance behind `clustering.assignments[i]`;
/// membership is updated incrementally between fits, centroids are not.
#[derive(Debug, Clone)]
struct ClassClusterCache {
    clustering: Clustering,
    slots: Vec<usize>,
    uses_since_fit: usize,
}

impl ClassClusterCache {
    fn remove_slot(&mut self, slot: usize) {
        if let Some(i) = self.slots.iter().position(|&s| s == slot) {
            let cluster = self.clustering.assignments[i];
            self.slots.swap_remove(i);
            self.clustering.assignments.swap_remove(i);
            self.clustering.sizes[cluster] -= 1;
        }
    }

    fn add_slot(&mut self, slot: usize, cluster: usize) {
        self.slots.push(slot);
        self.clustering.assignments.push(cluster);
        self.clustering.sizes[cluster] += 1;
    }

    /// Sorted member slots per cluster; the partition identity key used
    /// for stream-counter reconciliation across re-fits.
    fn partition(&self) -> Vec<Vec<usize>> {
        (0..self.clustering.k())
            .map(|c| {
                let mut members: Vec<usize> = self
                    .clustering
                    .members(c)
                    .iter()
                    .map(|&i| self.slots[i])
                    .collect();
                members.sort_unstable();
                members
            })
            .collect()
    }
}

/// Mutable state of one policy over one stream: the buffer, the total
/// observation count, and two independent seeded generators. Eviction and
/// acceptance decisions draw from the decision stream; k-means seeding
/// draws from the clustering stream, so the decision sequence of D-CBRS
/// stays aligned with CBRS when cluster structure is degenerate.
#[derive(Debug)]
pub struct PolicyState {
    kind: PolicyKind,
    buffer: MemoryBuffer,
    total_observed: u64,
    decision_rng: ChaCha8Rng,
    cluster_rng: ChaCha8Rng,
    params: DcbrsParams,
    caches: BTreeMap<usize, ClassClusterCache>,
    audit_log: Option<Vec<EvictionAudit>>,
}

impl PolicyState {
    pub fn new(kind: PolicyKind, capacity: usize, seed: u64) -> Self {
        Self::with_params(kind, capacity, seed, DcbrsParams::default())
    }

    pub fn with_params(kind: PolicyKind, capacity: usize, seed: u64, params: DcbrsParams) -> Self {
        Self {
            kind,
            buffer: MemoryBuffer::new(capacity),
            total_observed: 0,
            decision_rng: rng_from(substream(seed, "decision")),
            cluster_rng: rng_from(substream(seed, "cluster")),
            params,
            caches: BTreeMap::new(),
            audit_log: None,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn buffer(&self) -> &MemoryBuffer {
        &self.buffer
    }

    pub fn total_observed(&self) -> u64 {
        self.total_observed
    }

    /// Starts recording one `EvictionAudit` per D-CBRS eviction.
    pub fn enable_audit(&mut self) {
        self.audit_log = Some(Vec::new());
    }

    pub fn audit_log(&self) -> &[EvictionAudit] {
        self.audit_log.as_deref().unwrap_or(&[])
    }

    /// Feeds one instance through the configured policy.
    ///
    /// Every observation increments the total and per-class stream counts
    /// (and, under the oracle clusterer, the exact per-sub-label count)
    /// before the policy decides; acceptance probabilities therefore count
    /// the current arrival, e.g. capacity 500 admits its 501st observation
    /// with probability 500/501 under reservoir sampling.
    pub fn observe(&mut self, instance: &Instance) -> Result<MemoryEvent> {
        if let PolicyKind::Dcbrs {
            clusterer: ClustererKind::Oracle,
        } = self.kind
        {
            if instance.sub_label.is_none() {
                return Err(Error::MissingSubLabel { id: instance.id });
            }
        }
        self.total_observed += 1;
        self.buffer.note_observation(instance.label);
        if let PolicyKind::Dcbrs {
            clusterer: ClustererKind::Oracle,
        } = self.kind
        {
            // Oracle cluster counters are keyed by sub-label and exact
            // from the stream start; no re-seeding is ever needed.
            self.buffer
                .bump_cluster_stream_count(instance.label, instance.sub_label.unwrap());
        }
        match self.kind {
            PolicyKind::Reservoir => self.rs_observe(instance),
            PolicyKind::Cbrs => self.cbrs_observe(instance),
            PolicyKind::Dcbrs { clusterer } => self.dcbrs_observe(instance, clusterer),
        }
    }

    /// Reservoir sampling: store the first m arrivals, then admit arrival
    /// n with probability m/n into a uniformly chosen slot.
    fn rs_observe(&mut self, instance: &Instance) -> Result<MemoryEvent> {
        if !self.buffer.is_filled() {
            let slot = self.buffer.insert(instance.clone())?;
            return Ok(MemoryEvent::Stored { slot });
        }
        let m = self.buffer.capacity() as u64;
        // One draw yields both the accept decision and the uniform victim.
        let j = self.decision_rng.random_range(0..self.total_observed);
        if j < m {
            let evicted = self.buffer.replace(j as usize, instance.clone())?;
            Ok(MemoryEvent::Replaced {
                slot: j as usize,
                evicted,
            })
        } else {
            Ok(MemoryEvent::Rejected)
        }
    }

    fn cbrs_observe(&mut self, instance: &Instance) -> Result<MemoryEvent> {
        if self.buffer.capacity() == 0 {
            return Ok(MemoryEvent::Rejected);
        }
        if !self.buffer.is_filled() {
            let slot = self.buffer.insert(instance.clone())?;
            return Ok(MemoryEvent::Stored { slot });
        }
        self.buffer.update_full_classes()?;
        let label = instance.label;
        if !self.buffer.full_classes().contains(&label) {
            let victim_slot = self.pick_full_class_victim()?;
            let evicted = self.buffer.replace(victim_slot, instance.clone())?;
            return Ok(MemoryEvent::Replaced {
                slot: victim_slot,
                evicted,
            });
        }
        // Full label: admit with probability m_c / n_c, replacing a
        // uniformly chosen same-label instance. A full class drained from
        // memory has m_c = 0, so its arrivals are rejected outright. The
        // victim is drawn before the acceptance coin (an equivalent
        // ordering) so the decision stream stays in lockstep with D-CBRS
        // on degenerate clusterings.
        let slots = self.buffer.slots_of(label);
        if slots.is_empty() {
            return Ok(MemoryEvent::Rejected);
        }
        let victim_slot = slots[self.decision_rng.random_range(0..slots.len())];
        let m_c = self.buffer.class_count(label) as f64;
        let n_c = self.buffer.stream_count(label) as f64;
        let u: f64 = self.decision_rng.random();
        if u <= m_c / n_c {
            let evicted = self.buffer.replace(victim_slot, instance.clone())?;
            Ok(MemoryEvent::Replaced {
                slot: victim_slot,
                evicted,
            })
        } else {
            Ok(MemoryEvent::Rejected)
        }
    }

    fn dcbrs_observe(
        &mut self,
        instance: &Instance,
        clusterer: ClustererKind,
    ) -> Result<MemoryEvent> {
        if self.buffer.capacity() == 0 {
            return Ok(MemoryEvent::Rejected);
        }
        if !self.buffer.is_filled() {
            let slot = self.buffer.insert(instance.clone())?;
            return Ok(MemoryEvent::Stored { slot });
        }
        self.buffer.update_full_classes()?;
        let label = instance.label;
        if !self.buffer.full_classes().contains(&label) {
            // Evict a uniformly chosen member of the largest cluster of a
            // uniformly chosen full class; the arrival is always stored.
            let victim_class = self.pick_full_class()?;
            let (victim_slot, victim_cluster, sizes) =
                self.pick_largest_cluster_victim(victim_class, clusterer)?;
            let evicted = self.buffer.replace(victim_slot, instance.clone())?;
            if let Some(cache) = self.caches.get_mut(&victim_class) {
                cache.remove_slot(victim_slot);
            }
            self.record_audit(victim_slot, victim_class, victim_cluster, sizes);
            return Ok(MemoryEvent::Replaced {
                slot: victim_slot,
                evicted,
            });
        }
        match clusterer {
            ClustererKind::KMeans => self.dcbrs_full_kmeans(instance),
            ClustererKind::Oracle => self.dcbrs_full_oracle(instance),
        }
    }

    /// Full-label D-CBRS step under k-means: replace a random member of
    /// the label's largest cluster, with probability m_c/n_c at cluster
    /// granularity when the arrival itself belongs to the largest cluster
    /// and unconditionally otherwise.
    fn dcbrs_full_kmeans(&mut self, instance: &Instance) -> Result<MemoryEvent> {
        let label = instance.label;
        if self.buffer.class_count(label) == 0 {
            // Drained full class: m_c = 0, reject like CBRS does.
            return Ok(MemoryEvent::Rejected);
        }
        self.ensure_clustering(label)?;
        let cache = self.caches.get(&label).expect("clustering just ensured");
        let big = largest_cluster(&cache.clustering, &mut self.decision_rng);
        let members = cache.clustering.members(big);
        let victim_slot = cache.slots[members[self.decision_rng.random_range(0..members.len())]];
        let incoming_cluster = assign(&instance.features, &cache.clustering)?;
        let m_c = cache.clustering.sizes[big] as f64;
        let sizes = cache.clustering.sizes.clone();
        let n_c = self.buffer.bump_cluster_stream_count(label, incoming_cluster) as f64;
        if incoming_cluster == big {
            let u: f64 = self.decision_rng.random();
            if u > m_c / n_c {
                return Ok(MemoryEvent::Rejected);
            }
        }
        let evicted = self.buffer.replace(victim_slot, instance.clone())?;
        let cache = self.caches.get_mut(&label).expect("cache exists");
        cache.remove_slot(victim_slot);
        cache.add_slot(victim_slot, incoming_cluster);
        self.record_audit(victim_slot, label, big, sizes);
        Ok(MemoryEvent::Replaced {
            slot: victim_slot,
            evicted,
        })
    }

    /// Full-label D-CBRS step under the oracle clusterer: the partition is
    /// the exact sub-label decomposition and n_c counters are exact.
    fn dcbrs_full_oracle(&mut self, instance: &Instance) -> Result<MemoryEvent> {
        let label = instance.label;
        let slots = self.buffer.slots_of(label);
        if slots.is_empty() {
            return Ok(MemoryEvent::Rejected);
        }
        let refs: Vec<&Instance> = slots
            .iter()
            .map(|&s| self.buffer.get(s).expect("indexed slot"))
            .collect();
        let clustering = oracle_cluster(&refs)?;
        let subs = crate::clustering::oracle_cluster_subs(&refs)?;
        let big = largest_cluster(&clustering, &mut self.decision_rng);
        let members = clustering.members(big);
        let victim_slot = slots[members[self.decision_rng.random_range(0..members.len())]];
        let incoming_sub = instance.sub_label.expect("checked in observe");
        let in_largest = subs[big] == incoming_sub;
        if in_largest {
            let m_c = clustering.sizes[big] as f64;
            let n_c = self
                .buffer
                .cluster_stream_count(label, incoming_sub)
                .expect("bumped in observe") as f64;
            let u: f64 = self.decision_rng.random();
            if u > m_c / n_c {
                return Ok(MemoryEvent::Rejected);
            }
        }
        let sizes = clustering.sizes.clone();
        let evicted = self.buffer.replace(victim_slot, instance.clone())?;
        self.record_audit(victim_slot, label, big, sizes);
        Ok(MemoryEvent::Replaced {
            slot: victim_slot,
            evicted,
        })
    }

    /// Increments the cluster-granular stream counter of `(label,
    /// cluster)` after validating the id against the current clustering;
    /// the key is a k-means cluster id or a sub-label per the clusterer.
    pub fn cluster_stream_count_update(&mut self, label: usize, cluster: usize) -> Result<u64> {
        let clusterer = match self.kind {
            PolicyKind::Dcbrs { clusterer } => clusterer,
            _ => {
                return Err(Error::Config(
                    "cluster stream counters require a D-CBRS policy".into(),
                ))
            }
        };
        let known = match clusterer {
            ClustererKind::KMeans => self
                .caches
                .get(&label)
                .is_some_and(|c| cluster < c.clustering.k()),
            ClustererKind::Oracle => self
                .buffer
                .slots_of(label)
                .iter()
                .filter_map(|&s| self.buffer.get(s))
                .any(|i| i.sub_label == Some(cluster)),
        };
        if !known {
            return Err(Error::UnknownCluster { label, cluster });
        }
        Ok(self.buffer.bump_cluster_stream_count(label, cluster))
    }

    /// Uniformly picks a full class that still has members in memory.
    fn pick_full_class(&mut self) -> Result<usize> {
        let candidates: Vec<usize> = self
            .buffer
            .full_classes()
            .iter()
            .copied()
            .filter(|&c| self.buffer.class_count(c) > 0)
            .collect();
        if candidates.is_empty() {
            return Err(Error::NoFullClass);
        }
        Ok(candidates[self.decision_rng.random_range(0..candidates.len())])
    }

    /// CBRS victim: uniform member of a uniformly chosen full class.
    fn pick_full_class_victim(&mut self) -> Result<usize> {
        let class = self.pick_full_class()?;
        let slots = self.buffer.slots_of(class);
        Ok(slots[self.decision_rng.random_range(0..slots.len())])
    }

    /// D-CBRS victim inside `class`: uniform member of its largest
    /// cluster. Returns (slot, cluster id, cluster sizes).
    fn pick_largest_cluster_victim(
        &mut self,
        class: usize,
        clusterer: ClustererKind,
    ) -> Result<(usize, usize, Vec<usize>)> {
        match clusterer {
            ClustererKind::KMeans => {
                self.ensure_clustering(class)?;
                let cache = self.caches.get(&class).expect("clustering just ensured");
                let big = largest_cluster(&cache.clustering, &mut self.decision_rng);
                let members = cache.clustering.members(big);
                let victim =
                    cache.slots[members[self.decision_rng.random_range(0..members.len())]];
                Ok((victim, big, cache.clustering.sizes.clone()))
            }
            ClustererKind::Oracle => {
                let slots = self.buffer.slots_of(class);
                let refs: Vec<&Instance> = slots
                    .iter()
                    .map(|&s| self.buffer.get(s).expect("indexed slot"))
                    .collect();
                let clustering = oracle_cluster(&refs)?;
                let big = largest_cluster(&clustering, &mut self.decision_rng);
                let members = clustering.members(big);
                let victim = slots[members[self.decision_rng.random_range(0..members.len())]];
                Ok((victim, big, clustering.sizes))
            }
        }
    }

    /// Fits or reuses the k-means clustering of `class` according to the
    /// refresh interval, counting this call as one use.
    fn ensure_clustering(&mut self, class: usize) -> Result<()> {
        let due = match self.caches.get(&class) {
            None => true,
            Some(c) => c.uses_since_fit >= self.params.refresh_interval,
        };
        if due {
            self.fit_class(class)?;
        }
        let cache = self.caches.get_mut(&class).expect("cache present");
        cache.uses_since_fit += 1;
        Ok(())
    }

    /// Re-clusters one class and reconciles its stream counters: when the
    /// new partition equals the (incrementally maintained) old one, each
    /// cluster inherits its counter; otherwise all counters re-seed to the
    /// in-memory cluster sizes (n_c := m_c).
    fn fit_class(&mut self, class: usize) -> Result<()> {
        let slots = self.buffer.slots_of(class);
        let clustering = {
            let points: Vec<&[f32]> = slots
                .iter()
                .map(|&s| self.buffer.get(s).expect("indexed slot").features.as_ref())
                .collect();
            kmeans_fit_restarts(
                &points,
                self.params.clusters_per_class,
                &mut self.cluster_rng,
                self.params.kmeans_max_iters,
                self.params.kmeans_tol,
                self.params.kmeans_restarts,
            )?
        };
        let old: Option<BTreeMap<Vec<usize>, u64>> = self.caches.get(&class).map(|cache| {
            cache
                .partition()
                .into_iter()
                .enumerate()
                .map(|(c, members)| {
                    let n = self
                        .buffer
                        .cluster_stream_count(class, c)
                        .unwrap_or(members.len() as u64);
                    (members, n)
                })
                .collect()
        });
        let new_cache = ClassClusterCache {
            clustering,
            slots,
            uses_since_fit: 0,
        };
        let new_partition = new_cache.partition();
        let unchanged = old.as_ref().is_some_and(|old| {
            old.len() == new_partition.len()
                && new_partition.iter().all(|m| old.contains_key(m))
        });
        self.buffer.clear_cluster_stream_counts(class);
        for (c, members) in new_partition.iter().enumerate() {
            let seed = if unchanged {
                old.as_ref().unwrap()[members]
            } else {
                new_cache.clustering.sizes[c] as u64
            };
            self.buffer.set_cluster_stream_count(class, c, seed);
        }
        self.caches.insert(class, new_cache);
        Ok(())
    }

    fn record_audit(&mut self, slot: usize, label: usize, cluster: usize, sizes: Vec<usize>) {
        if let Some(log) = self.audit_log.as_mut() {
            log.push(EvictionAudit {
                victim_slot: slot,
                victim_label: label,
                victim_cluster: cluster,
                cluster_sizes: sizes,
            });
        }
    }
}
