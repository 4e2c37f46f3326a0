//! Metrics, aggregation, and report export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::clustering::kmeans_fit_restarts;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::memory::MemoryBuffer;

/// Mean and Student-t 95% CI half-width: t(0.975, n-1) * s / sqrt(n) with
/// the sample standard deviation. Fewer than two values leave the CI
/// absent.
pub fn summarize(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid t distribution")
        .inverse_cdf(0.975);
    (mean, Some(t * s / (n as f64).sqrt()))
}

/// One (merged label, sub-population) count in final memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionCell {
    pub label: usize,
    pub sub: usize,
    pub count: usize,
}

/// Final-memory composition; `estimated` marks that sub-populations came
/// from a reporting k-means fit instead of true sub-labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryComposition {
    pub cells: Vec<CompositionCell>,
    pub estimated: bool,
}

impl MemoryComposition {
    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    pub fn count(&self, label: usize, sub: usize) -> usize {
        self.cells
            .iter()
            .find(|c| c.label == label && c.sub == sub)
            .map_or(0, |c| c.count)
    }

}

/// Counts memory contents per (label, sub-population). True sub-labels
/// are used when every stored instance has one; otherwise each class is
/// clustered with k-means and the result is flagged as estimated.
pub fn memory_composition(
    buffer: &MemoryBuffer,
    clusters_per_class: usize,
    rng: &mut ChaCha8Rng,
    kmeans_max_iters: usize,
    kmeans_tol: f64,
    kmeans_restarts: usize,
) -> Result<MemoryComposition> {
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let exact = buffer.instances().all(|i| i.sub_label.is_some());
    if exact {
        for inst in buffer.instances() {
            let sub = inst.sub_label.expect("checked above");
            *cells.entry((inst.label, sub)).or_insert(0) += 1;
        }
    } else {
        for (label, _) in buffer.class_counts() {
            let slots = buffer.slots_of(label);
            let points: Vec<&[f32]> = slots
                .iter()
                .map(|&s| &*buffer.get(s).expect("occupied slot").features)
                .collect();
            let k = clusters_per_class.min(points.len());
            let clustering =
                kmeans_fit_restarts(&points, k, rng, kmeans_max_iters, kmeans_tol, kmeans_restarts)?;
            for &cluster in &clustering.assignments {
                *cells.entry((label, cluster)).or_insert(0) += 1;
            }
        }
    }
    Ok(MemoryComposition {
        cells: cells
            .into_iter()
            .map(|((label, sub), count)| CompositionCell { label, sub, count })
            .collect(),
        estimated: !exact,
    })
}

/// Everything recorded about a single seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub run_seed: u64,
    pub accuracy: f64,
    pub optimizer_steps: u64,
    pub stream_batches: usize,
    pub composition: MemoryComposition,
    /// Retention factor per original class label.
    pub retention_per_class: BTreeMap<usize, f64>,
    /// Original label -> merged label, when the run merged classes.
    pub merge_map: Option<Vec<usize>>,
    pub wall_clock_secs: f64,
}

/// Aggregated result of one experiment (one config, `runs` seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub policy_label: String,
    pub runs: Vec<RunRecord>,
    pub mean_accuracy: f64,
    pub ci_half_width: Option<f64>,
    pub total_wall_clock_secs: f64,
}

impl RunReport {
    pub fn from_records(config: RunConfig, records: Vec<RunRecord>) -> Self {
        let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        let (mean_accuracy, ci_half_width) = summarize(&accs);
        let total_wall_clock_secs = records.iter().map(|r| r.wall_clock_secs).sum();
        let policy_label = config.policy_label();
        Self {
            config,
            policy_label,
            runs: records,
            mean_accuracy,
            ci_half_width,
            total_wall_clock_secs,
        }
    }

    /// Clears wall-clock fields so two same-seed reports compare equal.
    pub fn zero_timing(&mut self) {
        self.total_wall_clock_secs = 0.0;
        for r in &mut self.runs {
            r.wall_clock_secs = 0.0;
        }
    }

    /// Checks that the stored aggregate recomputes exactly from the
    /// per-run rows.
    pub fn verify_aggregates(&self) -> Result<()> {
        let accs: Vec<f64> = self.runs.iter().map(|r| r.accuracy).collect();
        let (mean, ci) = summarize(&accs);
        let mean_ok = mean.to_bits() == self.mean_accuracy.to_bits();
        let ci_ok = match (ci, self.ci_half_width) {
            (None, None) => true,
            (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        };
        if !(mean_ok && ci_ok) {
            return Err(Error::Config(format!(
                "report aggregate does not recompute from runs: stored {} / {:?}, recomputed {} / {:?}",
                self.mean_accuracy, self.ci_half_width, mean, ci
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// Writes through a temp file in the target directory plus rename, so a
/// failed export never leaves a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn export_json(report: &RunReport, path: &Path) -> Result<()> {
    atomic_write(path, &report.to_json()?)
}

pub fn read_json(path: &Path) -> Result<RunReport> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

const CSV_HEADER: [&str; 11] = [
    "kind",
    "scenario",
    "policy",
    "dataset",
    "run_index",
    "run_seed",
    "accuracy",
    "optimizer_steps",
    "wall_clock_secs",
    "mean_accuracy",
    "ci_half_width",
];

/// One row per run plus one aggregate row per report, deterministic
/// column order.
pub fn export_csv(reports: &[&RunReport], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(CSV_HEADER)?;
    for report in reports {
        let scenario = report.config.scenario.name();
        let dataset = report.config.dataset.display().to_string();
        for r in &report.runs {
            wtr.write_record([
                "run",
                scenario,
                &report.policy_label,
                &dataset,
                &r.run_index.to_string(),
                &r.run_seed.to_string(),
                &r.accuracy.to_string(),
                &r.optimizer_steps.to_string(),
                &r.wall_clock_secs.to_string(),
                "",
                "",
            ])?;
        }
        wtr.write_record([
            "aggregate",
            scenario,
            &report.policy_label,
            &dataset,
            "",
            "",
            "",
            "",
            &report.total_wall_clock_secs.to_string(),
            &report.mean_accuracy.to_string(),
            &report
                .ci_half_width
                .map(|c| c.to_string())
                .unwrap_or_default(),
        ])?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    atomic_write(path, &bytes)
}
