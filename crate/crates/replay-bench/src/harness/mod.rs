//! Experiment orchestration: scenario wiring, per-run seed discipline,
//! training, evaluation, and report assembly.
//!
//! Seed discipline: the master seed fans out to one seed per run index,
//! and each run derives named sub-streams (retention, merge, shuffle,
//! policy, init, replay, composition). Dataset randomness never depends
//! on the policy, so every policy sees the same streams for a given
//! master seed.

pub mod config;
pub mod report;

use std::path::Path;
use std::time::Instant;

use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    evaluate, train_with_replay, AdamState, Mlp, Precision, TrainConfig, HIDDEN_WIDTH,
};
use crate::rng::{rng_from, substream, substream_indexed};
use crate::samplers::PolicyState;
use crate::streams::{
    apply_merge_map, apply_retention, build_stream, load_idx, make_synthetic, Dataset,
    StreamPlan, SyntheticSpec,
};

pub use config::{
    load_config_file, resolve_config, ConfigPatch, PolicyName, RunConfig, Scenario,
};
pub use report::{
    export_csv, export_json, memory_composition, read_json, summarize, CompositionCell,
    MemoryComposition, RunRecord, RunReport,
};

const IDX_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// A loaded data source, shared by all runs of an experiment.
pub enum Source {
    Idx { train: Dataset, test: Dataset },
    Synthetic(SyntheticSpec),
}

/// A directory loads as the canonical IDX file quadruple; a file parses
/// as a synthetic blob spec.
pub fn load_source(path: &Path) -> Result<Source> {
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return Ok(Source::Synthetic(SyntheticSpec::parse(&text)?));
    }
    let train = load_idx(&path.join(IDX_FILES[0].0), &path.join(IDX_FILES[0].1))?;
    let test = load_idx(&path.join(IDX_FILES[1].0), &path.join(IDX_FILES[1].1))?;
    Ok(Source::Idx { train, test })
}

struct RunDatasets {
    train: Dataset,
    test: Dataset,
    retention_per_class: std::collections::BTreeMap<usize, f64>,
}

/// Builds one run's train/test pair: retention first, then the optional
/// class merge; the test set gets the training merge map and no
/// retention. Synthetic sources draw independent train and test samples.
fn build_run_datasets(cfg: &RunConfig, source: &Source, run_seed: u64) -> Result<RunDatasets> {
    let (base_train, base_test) = match source {
        Source::Idx { train, test } => (train.clone(), test.clone()),
        Source::Synthetic(spec) => {
            let train =
                make_synthetic(spec, &mut rng_from(substream(run_seed, "synthetic-train")))?;
            let test =
                make_synthetic(spec, &mut rng_from(substream(run_seed, "synthetic-test")))?;
            (train, test)
        }
    };
    let (kept, plan) = apply_retention(
        &base_train,
        &cfg.retention,
        &mut rng_from(substream(run_seed, "retention")),
    )?;
    let (train, test) = match cfg.merge_target {
        Some(target) => {
            let merged = crate::streams::merge_classes(
                &kept,
                target,
                &mut rng_from(substream(run_seed, "merge")),
            )?;
            let map = merged.merge_map.clone().expect("merge sets the map");
            let test = apply_merge_map(&base_test, &map, target)?;
            (merged, test)
        }
        None => (kept, base_test),
    };
    Ok(RunDatasets {
        train,
        test,
        retention_per_class: plan.per_class,
    })
}

fn single_run_typed<F: NdFloat>(
    cfg: &RunConfig,
    source: &Source,
    run_index: usize,
) -> Result<RunRecord> {
    let run_seed = substream_indexed(cfg.seed, "run", run_index as u64);
    let started = Instant::now();
    let data = build_run_datasets(cfg, source, run_seed)?;
    let stream = build_stream(
        &data.train,
        cfg.batch_size,
        &mut rng_from(substream(run_seed, "shuffle")),
    )?;
    let mut policy = PolicyState::with_params(
        cfg.policy.kind(cfg.scenario),
        cfg.memory_size,
        substream(run_seed, "policy"),
        cfg.dcbrs_params(),
    );
    let mut mlp = Mlp::<F>::init(
        &[
            data.train.dim(),
            HIDDEN_WIDTH,
            HIDDEN_WIDTH,
            data.train.class_count,
        ],
        &mut rng_from(substream(run_seed, "init")),
    )?;
    let cast = |x: f64| F::from(x).expect("finite hyperparameter");
    let mut opt = AdamState::new(&mlp);
    opt.lr = cast(cfg.lr);
    opt.beta1 = cast(cfg.beta1);
    opt.beta2 = cast(cfg.beta2);
    opt.epsilon = cast(cfg.epsilon);
    let train_cfg = TrainConfig {
        batch_size: cfg.batch_size,
        replay_steps: cfg.replay_steps,
        seed: run_seed,
        precision: cfg.precision,
    };
    train_with_replay(&mut mlp, &mut opt, &stream, &mut policy, &train_cfg)?;
    let accuracy = evaluate(&mlp, &data.test, data.train.merge_map.as_deref())?;
    let composition = memory_composition(
        policy.buffer(),
        cfg.clusters_per_class,
        &mut rng_from(substream(run_seed, "composition")),
        cfg.kmeans_max_iters,
        cfg.kmeans_tol,
        cfg.kmeans_restarts,
    )?;
    let wall_clock_secs = started.elapsed().as_secs_f64();
    if wall_clock_secs > cfg.slow_run_warn_secs as f64 {
        eprintln!(
            "warning: run {run_index} ({}) took {wall_clock_secs:.0} s, over the {} s bound",
            cfg.policy_label(),
            cfg.slow_run_warn_secs
        );
    }
    Ok(RunRecord {
        run_index,
        run_seed,
        accuracy,
        optimizer_steps: opt.t,
        stream_batches: stream.batches.len(),
        composition,
        retention_per_class: data.retention_per_class,
        merge_map: data.train.merge_map.clone(),
        wall_clock_secs,
    })
}

fn single_run(cfg: &RunConfig, source: &Source, run_index: usize) -> Result<RunRecord> {
    match cfg.precision {
        Precision::F32 => single_run_typed::<f32>(cfg, source, run_index),
        Precision::F64 => single_run_typed::<f64>(cfg, source, run_index),
    }
}

/// Runs the full experiment: `cfg.runs` independent seeded runs of one
/// (scenario, policy, dataset) cell, aggregated into a report.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let source = load_source(&cfg.dataset)?;
    if let Source::Synthetic(_) = source {
        // Synthetic specs carry sub-labels, so any scenario is valid.
    } else if cfg.scenario != Scenario::Base && cfg.merge_target.is_none() {
        return Err(Error::Config(
            "merged scenarios need merge_target on IDX datasets".into(),
        ));
    }
    let mut records = Vec::with_capacity(cfg.runs);
    for run_index in 0..cfg.runs {
        records.push(single_run(cfg, &source, run_index)?);
    }
    let mut report = RunReport::from_records(cfg.clone(), records);
    if cfg.zero_timing {
        report.zero_timing();
    }
    Ok(report)
}

/// Inspection artifact for `gen`: the exact structure of one run's
/// stream without training anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub config: RunConfig,
    pub run_index: usize,
    pub run_seed: u64,
    pub retention_per_class: std::collections::BTreeMap<usize, f64>,
    pub merge_map: Option<Vec<usize>>,
    pub class_order: Vec<usize>,
    pub batches: Vec<ManifestBatch>,
    pub total_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBatch {
    pub index: usize,
    pub label: usize,
    pub size: usize,
    pub instance_ids: Vec<u64>,
}

/// Materializes one run's retained/merged dataset and stream plan.
pub fn generate_manifest(
    cfg: &RunConfig,
    run_index: usize,
) -> Result<(Dataset, StreamPlan, StreamManifest)> {
    cfg.validate()?;
    let source = load_source(&cfg.dataset)?;
    let run_seed = substream_indexed(cfg.seed, "run", run_index as u64);
    let data = build_run_datasets(cfg, &source, run_seed)?;
    let stream = build_stream(
        &data.train,
        cfg.batch_size,
        &mut rng_from(substream(run_seed, "shuffle")),
    )?;
    let batches = stream
        .batches
        .iter()
        .enumerate()
        .map(|(index, b)| ManifestBatch {
            index,
            label: b.instances[0].label,
            size: b.len(),
            instance_ids: b.instances.iter().map(|i| i.id).collect(),
        })
        .collect();
    let manifest = StreamManifest {
        config: cfg.clone(),
        run_index,
        run_seed,
        retention_per_class: data.retention_per_class,
        merge_map: data.train.merge_map.clone(),
        class_order: stream.class_order.clone(),
        batches,
        total_instances: stream.total_instances(),
    };
    Ok((data.train, stream, manifest))
}
