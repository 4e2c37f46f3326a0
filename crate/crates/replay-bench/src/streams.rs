//! Dataset ingestion and stream simulation: IDX file loading, per-class
//! retention (imbalance simulation), random class merging (intra-class
//! diversity simulation), class-incremental stream construction, and
//! synthetic Gaussian-blob fixtures.
//!
//! All randomness here derives from dataset-scoped seeds, never from the
//! policy, so every policy in an experiment consumes an identical stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::memory::{Batch, BatchOrigin, Instance};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// A labeled dataset with contiguous labels `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub class_count: usize,
    /// Original label -> merged label, present after `merge_classes`.
    pub merge_map: Option<Vec<usize>>,
}

impl Dataset {
    /// Instances of one class, in dataset order.
    pub fn class_members(&self, label: usize) -> Vec<&Instance> {
        self.instances.iter().filter(|i| i.label == label).collect()
    }

    /// Per-class instance counts, ascending by label.
    pub fn class_sizes(&self) -> BTreeMap<usize, usize> {
        let mut sizes = BTreeMap::new();
        for inst in &self.instances {
            *sizes.entry(inst.label).or_insert(0) += 1;
        }
        sizes
    }

    pub fn dim(&self) -> usize {
        self.instances.first().map_or(0, Instance::dim)
    }
}

/// Which retention fraction each class kept.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionPlan {
    pub factors: Vec<f64>,
    pub per_class: BTreeMap<usize, f64>,
}

/// Ordered class-incremental stream: all batches of `class_order[i]`
/// precede all batches of `class_order[i+1]`; every batch except possibly
/// the last of each class holds exactly `batch_size` instances.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPlan {
    pub class_order: Vec<usize>,
    pub batches: Vec<Batch>,
    pub batch_size: usize,
}

impl StreamPlan {
    pub fn total_instances(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.to_string(),
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image/label file pair into a dataset.
///
/// Headers are big-endian: magic 2051 then count/rows/cols for images,
/// magic 2049 then count for labels. Pixel bytes scale to `[0, 1]` by
/// division by 255. Image and label counts must match.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0, &img_name)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: img_name,
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&img_bytes, 4, &img_name)? as usize;
    let rows = read_u32_be(&img_bytes, 8, &img_name)? as usize;
    let cols = read_u32_be(&img_bytes, 12, &img_name)? as usize;
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if img_bytes.len() < needed {
        return Err(Error::Truncated {
            path: img_name,
            needed,
            got: img_bytes.len(),
        });
    }

    let magic = read_u32_be(&lbl_bytes, 0, &lbl_name)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lbl_name,
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let lbl_count = read_u32_be(&lbl_bytes, 4, &lbl_name)? as usize;
    if lbl_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    let needed = 8 + count;
    if lbl_bytes.len() < needed {
        return Err(Error::Truncated {
            path: lbl_name,
            needed,
            got: lbl_bytes.len(),
        });
    }

    let mut instances = Vec::with_capacity(count);
    let mut max_label = 0usize;
    for i in 0..count {
        let start = 16 + i * dim;
        let features: Vec<f32> = img_bytes[start..start + dim]
            .iter()
            .map(|&b| f32::from(b) / 255.0)
            .collect();
        let label = lbl_bytes[8 + i] as usize;
        max_label = max_label.max(label);
        instances.push(Instance::new(i as u64, features, label, None));
    }
    Ok(Dataset {
        instances,
        class_count: max_label + 1,
        merge_map: None,
    })
}

/// Round-half-up of `factor * count`.
fn retained_count(factor: f64, count: usize) -> usize {
    (factor * count as f64 + 0.5).floor() as usize
}

/// Simulates class imbalance: each class keeps `round(factor * size)`
/// uniformly sampled instances, with factors drawn without replacement
/// from the pool; the pool re-initializes when classes outnumber factors.
pub fn apply_retention(
    dataset: &Dataset,
    factors: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, RetentionPlan)> {
    if factors.is_empty() {
        return Err(Error::InvalidSpec("retention factor set is empty".into()));
    }
    for &f in factors {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "retention factor {f} outside (0, 1]"
            )));
        }
    }
    let mut pool: Vec<f64> = Vec::new();
    let mut per_class = BTreeMap::new();
    for label in 0..dataset.class_count {
        if pool.is_empty() {
            pool = factors.to_vec();
        }
        let pick = rng.random_range(0..pool.len());
        per_class.insert(label, pool.swap_remove(pick));
    }
    let mut instances = Vec::new();
    for label in 0..dataset.class_count {
        let members = dataset.class_members(label);
        let keep = retained_count(per_class[&label], members.len());
        let picked = rand::seq::index::sample(rng, members.len(), keep.min(members.len()));
        let mut chosen: Vec<usize> = picked.iter().collect();
        chosen.sort_unstable();
        instances.extend(chosen.into_iter().map(|i| members[i].clone()));
    }
    Ok((
        Dataset {
            instances,
            class_count: dataset.class_count,
            merge_map: dataset.merge_map.clone(),
        },
        RetentionPlan {
            factors: factors.to_vec(),
            per_class,
        },
    ))
}

/// Randomly partitions the original labels into `target_count` near-equal
/// groups (sizes differ by at most one). Groups are ordered by their
/// smallest original label, each instance's label becomes its group id,
/// and the original label moves into `sub_label`.
pub fn merge_classes(
    dataset: &Dataset,
    target_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let classes = dataset.class_count;
    if target_count == 0 || target_count > classes {
        return Err(Error::InvalidSpec(format!(
            "merge target {target_count} outside 1..={classes}"
        )));
    }
    let mut labels: Vec<usize> = (0..classes).collect();
    labels.shuffle(rng);
    let base = classes / target_count;
    let extra = classes % target_count;
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(target_count);
    let mut cursor = 0;
    for g in 0..target_count {
        let size = base + usize::from(g < extra);
        let mut group: Vec<usize> = labels[cursor..cursor + size].to_vec();
        group.sort_unstable();
        groups.push(group);
        cursor += size;
    }
    groups.sort_by_key(|g| g[0]);
    let mut merge_map = vec![0usize; classes];
    for (gid, group) in groups.iter().enumerate() {
        for &orig in group {
            merge_map[orig] = gid;
        }
    }
    apply_merge_map(dataset, &merge_map, target_count)
}

/// Applies an existing original-label -> merged-label map (used to map the
/// test set with the training set's grouping).
pub fn apply_merge_map(
    dataset: &Dataset,
    merge_map: &[usize],
    target_count: usize,
) -> Result<Dataset> {
    if merge_map.len() != dataset.class_count {
        return Err(Error::Config(format!(
            "merge map covers {} labels but dataset has {}",
            merge_map.len(),
            dataset.class_count
        )));
    }
    let mut seen = vec![false; target_count];
    for &m in merge_map {
        if m >= target_count {
            return Err(Error::Config(format!(
                "merge map entry {m} outside 0..{target_count}"
            )));
        }
        seen[m] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Config(
            "merge map is not surjective onto merged labels".into(),
        ));
    }
    let instances = dataset
        .instances
        .iter()
        .map(|inst| Instance {
            id: inst.id,
            features: inst.features.clone(),
            label: merge_map[inst.label],
            sub_label: Some(inst.label),
        })
        .collect();
    Ok(Dataset {
        instances,
        class_count: target_count,
        merge_map: Some(merge_map.to_vec()),
    })
}

/// Builds the class-incremental stream: a seeded permutation fixes the
/// class order, instances shuffle within each class, and batches of
/// `batch_size` are cut per class (the last batch of a class may be
/// short). Instances are re-numbered with monotone stream ids.
pub fn build_stream(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StreamPlan> {
    if dataset.instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidSpec("batch_size must be at least 1".into()));
    }
    let mut class_order: Vec<usize> = (0..dataset.class_count).collect();
    class_order.shuffle(rng);
    // Classes emptied by retention contribute no batches but keep their
    // position in the order for the record.
    let mut batches = Vec::new();
    let mut next_id = 0u64;
    for &label in &class_order {
        let members = dataset.class_members(label);
        if members.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let mut instances = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut inst = members[i].clone();
                inst.id = next_id;
                next_id += 1;
                instances.push(inst);
            }
            batches.push(Batch::new(instances, BatchOrigin::Stream));
        }
    }
    Ok(StreamPlan {
        class_order,
        batches,
        batch_size,
    })
}

/// One Gaussian blob of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub class: usize,
    pub sub: usize,
    pub count: usize,
    pub var: f64,
    pub mean: Vec<f64>,
}

/// Synthetic dataset description: isotropic Gaussian blobs per
/// (class, sub-cluster), clamped to the unit hypercube.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub blobs: Vec<BlobSpec>,
}

impl SyntheticSpec {
    /// Parses the plain-text key-value form:
    ///
    /// ```text
    /// dim = 2
    /// blob = class=0 sub=0 count=90 var=0.01 mean=0.2,0.8
    /// blob = class=0 sub=1 count=10 var=0.01 mean=0.8,0.2
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut blobs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidSpec(format!("line {}: expected key = value", lineno + 1))
            })?;
            match key.trim() {
                "dim" => {
                    dim = Some(value.trim().parse().map_err(|_| {
                        Error::InvalidSpec(format!("line {}: bad dim", lineno + 1))
                    })?);
                }
                "blob" => {
                    let mut class = None;
                    let mut sub = None;
                    let mut count = None;
                    let mut var = None;
                    let mut mean = None;
                    for token in value.split_whitespace() {
                        let (k, v) = token.split_once('=').ok_or_else(|| {
                            Error::InvalidSpec(format!(
                                "line {}: blob token {token:?} is not k=v",
                                lineno + 1
                            ))
                        })?;
                        let bad = |what: &str| {
                            Error::InvalidSpec(format!("line {}: bad {what}", lineno + 1))
                        };
                        match k {
                            "class" => class = Some(v.parse().map_err(|_| bad("class"))?),
                            "sub" => sub = Some(v.parse().map_err(|_| bad("sub"))?),
                            "count" => count = Some(v.parse().map_err(|_| bad("count"))?),
                            "var" => var = Some(v.parse().map_err(|_| bad("var"))?),
                            "mean" => {
                                let parsed: std::result::Result<Vec<f64>, _> =
                                    v.split(',').map(str::parse).collect();
                                mean = Some(parsed.map_err(|_| bad("mean"))?);
                            }
                            other => {
                                return Err(Error::InvalidSpec(format!(
                                    "line {}: unknown blob field {other:?}",
                                    lineno + 1
                                )))
                            }
                        }
                    }
                    let missing =
                        |what: &str| Error::InvalidSpec(format!("line {}: missing {what}", lineno + 1));
                    blobs.push(BlobSpec {
                        class: class.ok_or_else(|| missing("class"))?,
                        sub: sub.ok_or_else(|| missing("sub"))?,
                        count: count.ok_or_else(|| missing("count"))?,
                        var: var.ok_or_else(|| missing("var"))?,
                        mean: mean.ok_or_else(|| missing("mean"))?,
                    });
                }
                other => {
                    return Err(Error::InvalidSpec(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let spec = SyntheticSpec {
            dim: dim.ok_or_else(|| Error::InvalidSpec("missing dim".into()))?,
            blobs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidSpec("dim must be at least 1".into()));
        }
        if self.blobs.is_empty() {
            return Err(Error::InvalidSpec("spec has no blobs".into()));
        }
        let mut classes = std::collections::BTreeSet::new();
        for blob in &self.blobs {
            if blob.mean.len() != self.dim {
                return Err(Error::InvalidSpec(format!(
                    "blob mean length {} does not match dim {}",
                    blob.mean.len(),
                    self.dim
                )));
            }
            if !blob.var.is_finite() || blob.var < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "blob variance {} is not a finite non-negative number",
                    blob.var
                )));
            }
            if blob.count == 0 {
                return Err(Error::InvalidSpec("blob count must be positive".into()));
            }
            classes.insert(blob.class);
        }
        if !classes.iter().copied().eq(0..classes.len()) {
            return Err(Error::InvalidSpec(
                "blob classes must cover 0..class_count contiguously".into(),
            ));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.blobs.iter().map(|b| b.class).max().map_or(0, |m| m + 1)
    }
}

/// Samples the synthetic dataset: per blob, `count` isotropic Gaussian
/// draws around the mean, clamped to `[0, 1]`, with `sub_label` set to the
/// blob's sub id.
pub fn make_synthetic(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    spec.validate()?;
    let mut instances = Vec::new();
    let mut id = 0u64;
    for blob in &spec.blobs {
        let sd = blob.var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for _ in 0..blob.count {
            let features: Vec<f32> = blob
                .mean
                .iter()
                .map(|&m| {
                    let z: f64 = normal.sample(rng);
                    (m + sd * z).clamp(0.0, 1.0) as f32
                })
                .collect();
            instances.push(Instance::new(id, features, blob.class, Some(blob.sub)));
            id += 1;
        }
    }
    Ok(Dataset {
        instances,
        class_count: spec.class_count(),
        merge_map: None,
    })
}
