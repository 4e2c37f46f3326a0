//! Experiment configuration: defaults, validation, and the plain
//! `key = value` config-file format used by the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::DEFAULT_KMEANS_RESTARTS;
use crate::error::{Error, Result};
use crate::model::Precision;
use crate::samplers::{ClustererKind, DcbrsParams, PolicyKind};

/// Which experimental setup a run reproduces. The scenario decides which
/// clusterer D-CBRS uses: the omniscient setup reads true sub-labels,
/// everything else runs k-means on memory contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Class imbalance only.
    Base,
    /// Imbalance plus merged classes, diversity read from sub-labels.
    Omniscient,
    /// Imbalance plus merged classes, diversity estimated by k-means.
    Realistic,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Base => "base",
            Scenario::Omniscient => "omniscient",
            Scenario::Realistic => "realistic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Scenario::Base),
            "omniscient" => Ok(Scenario::Omniscient),
            "realistic" => Ok(Scenario::Realistic),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }

    pub fn clusterer(self) -> ClustererKind {
        match self {
            Scenario::Omniscient => ClustererKind::Oracle,
            _ => ClustererKind::KMeans,
        }
    }
}

/// Policy selector as it appears in configs; the D-CBRS clusterer is
/// resolved from the scenario, not chosen directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Reservoir,
    Cbrs,
    Dcbrs,
}

impl PolicyName {
    pub fn name(self) -> &'static str {
        match self {
            PolicyName::Reservoir => "reservoir",
            PolicyName::Cbrs => "cbrs",
            PolicyName::Dcbrs => "dcbrs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reservoir" | "rs" => Ok(PolicyName::Reservoir),
            "cbrs" => Ok(PolicyName::Cbrs),
            "dcbrs" => Ok(PolicyName::Dcbrs),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }

    pub fn kind(self, scenario: Scenario) -> PolicyKind {
        match self {
            PolicyName::Reservoir => PolicyKind::Reservoir,
            PolicyName::Cbrs => PolicyKind::Cbrs,
            PolicyName::Dcbrs => PolicyKind::Dcbrs {
                clusterer: scenario.clusterer(),
            },
        }
    }
}

/// Full experiment description; every field is echoed into reports.
///
/// `dataset` is either a directory holding the four canonical IDX files
/// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`) or a synthetic
/// blob-spec text file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub scenario: Scenario,
    pub policy: PolicyName,
    pub memory_size: usize,
    pub batch_size: usize,
    pub replay_steps: usize,
    pub merge_target: Option<usize>,
    pub retention: Vec<f64>,
    pub clusters_per_class: usize,
    pub refresh_interval: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub kmeans_restarts: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub runs: usize,
    pub precision: Precision,
    /// Report wall-clock fields as zero so reports compare bit-for-bit.
    pub zero_timing: bool,
    /// Warn on stderr when one run exceeds this many seconds.
    pub slow_run_warn_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/mnist"),
            scenario: Scenario::Base,
            policy: PolicyName::Dcbrs,
            memory_size: 500,
            batch_size: 10,
            replay_steps: 5,
            merge_target: None,
            retention: vec![0.01, 0.05, 0.1, 0.3, 1.0],
            clusters_per_class: 2,
            refresh_interval: 1,
            kmeans_max_iters: 50,
            kmeans_tol: 1e-4,
            kmeans_restarts: DEFAULT_KMEANS_RESTARTS,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            runs: 5,
            precision: Precision::F32,
            zero_timing: false,
            slow_run_warn_secs: 1800,
        }
    }
}

impl RunConfig {
    /// True when `dataset` points at a synthetic blob-spec file rather
    /// than an IDX directory.
    pub fn dataset_is_synthetic(&self) -> bool {
        self.dataset.is_file()
    }

    pub fn dcbrs_params(&self) -> DcbrsParams {
        DcbrsParams {
            clusters_per_class: self.clusters_per_class,
            refresh_interval: self.refresh_interval,
            kmeans_max_iters: self.kmeans_max_iters,
            kmeans_tol: self.kmeans_tol,
            kmeans_restarts: self.kmeans_restarts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.memory_size == 0 {
            return bad("memory_size must be at least 1".into());
        }
        if self.batch_size == 0 || self.replay_steps == 0 {
            return bad("batch_size and replay_steps must be at least 1".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.retention.is_empty() {
            return bad("retention set is empty".into());
        }
        if self.retention.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad(format!("retention factors {:?} outside (0, 1]", self.retention));
        }
        if self.clusters_per_class == 0 || self.refresh_interval == 0 {
            return bad("clusters_per_class and refresh_interval must be at least 1".into());
        }
        if self.kmeans_max_iters == 0 || self.kmeans_restarts == 0 {
            return bad("kmeans_max_iters and kmeans_restarts must be at least 1".into());
        }
        if !(self.kmeans_tol >= 0.0 && self.kmeans_tol.is_finite()) {
            return bad(format!("kmeans_tol {} must be finite and non-negative", self.kmeans_tol));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive and finite", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be positive and finite", self.epsilon));
        }
        if matches!(self.merge_target, Some(0)) {
            return bad("merge_target must be at least 1".into());
        }
        match self.scenario {
            Scenario::Base => {
                if self.merge_target.is_some() {
                    return bad("base scenario does not merge classes".into());
                }
            }
            Scenario::Omniscient | Scenario::Realistic => {
                if self.merge_target.is_none() && !self.dataset_is_synthetic() {
                    return bad(format!(
                        "{} scenario on an IDX dataset requires merge_target",
                        self.scenario.name()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Label used in reports, e.g. `dcbrs-oracle`.
    pub fn policy_label(&self) -> String {
        match self.policy.kind(self.scenario) {
            PolicyKind::Dcbrs { clusterer: ClustererKind::Oracle } => "dcbrs-oracle".into(),
            PolicyKind::Dcbrs { clusterer: ClustererKind::KMeans } => "dcbrs-kmeans".into(),
            other => other.name().into(),
        }
    }
}

/// A partial configuration; the CLI layers file values then flag values
/// over the defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigPatch {
    pub dataset: Option<PathBuf>,
    pub scenario: Option<Scenario>,
    pub policy: Option<PolicyName>,
    pub memory_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub replay_steps: Option<usize>,
    /// `Some(None)` clears an inherited merge target.
    pub merge_target: Option<Option<usize>>,
    pub retention: Option<Vec<f64>>,
    pub clusters_per_class: Option<usize>,
    pub refresh_interval: Option<usize>,
    pub kmeans_max_iters: Option<usize>,
    pub kmeans_tol: Option<f64>,
    pub kmeans_restarts: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub precision: Option<Precision>,
    pub zero_timing: Option<bool>,
    pub slow_run_warn_secs: Option<u64>,
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

pub fn parse_retention_list(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|t| parse_as::<f64>("retention", t.trim()))
        .collect()
}

pub fn parse_precision(value: &str) -> Result<Precision> {
    match value {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Config(format!("unknown precision {other:?}"))),
    }
}

impl ConfigPatch {
    /// Parses the plain config-file format: one `key = value` per line,
    /// `#` comments, blank lines ignored.
    pub fn parse_file(text: &str) -> Result<Self> {
        let mut patch = ConfigPatch::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            patch
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(patch)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "scenario" => self.scenario = Some(Scenario::parse(value)?),
            "policy" => self.policy = Some(PolicyName::parse(value)?),
            "memory_size" => self.memory_size = Some(parse_as(key, value)?),
            "batch_size" => self.batch_size = Some(parse_as(key, value)?),
            "replay_steps" => self.replay_steps = Some(parse_as(key, value)?),
            "merge_target" => {
                self.merge_target = Some(if value == "none" {
                    None
                } else {
                    Some(parse_as(key, value)?)
                });
            }
            "retention" => self.retention = Some(parse_retention_list(value)?),
            "clusters_per_class" => self.clusters_per_class = Some(parse_as(key, value)?),
            "refresh_interval" => self.refresh_interval = Some(parse_as(key, value)?),
            "kmeans_max_iters" => self.kmeans_max_iters = Some(parse_as(key, value)?),
            "kmeans_tol" => self.kmeans_tol = Some(parse_as(key, value)?),
            "kmeans_restarts" => self.kmeans_restarts = Some(parse_as(key, value)?),
            "lr" => self.lr = Some(parse_as(key, value)?),
            "beta1" => self.beta1 = Some(parse_as(key, value)?),
            "beta2" => self.beta2 = Some(parse_as(key, value)?),
            "epsilon" => self.epsilon = Some(parse_as(key, value)?),
            "seed" => self.seed = Some(parse_as(key, value)?),
            "runs" => self.runs = Some(parse_as(key, value)?),
            "precision" => self.precision = Some(parse_precision(value)?),
            "zero_timing" => self.zero_timing = Some(parse_as(key, value)?),
            "slow_run_warn_secs" => self.slow_run_warn_secs = Some(parse_as(key, value)?),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        take!(dataset);
        take!(scenario);
        take!(policy);
        take!(memory_size);
        take!(batch_size);
        take!(replay_steps);
        take!(merge_target);
        take!(retention);
        take!(clusters_per_class);
        take!(refresh_interval);
        take!(kmeans_max_iters);
        take!(kmeans_tol);
        take!(kmeans_restarts);
        take!(lr);
        take!(beta1);
        take!(beta2);
        take!(epsilon);
        take!(seed);
        take!(runs);
        take!(precision);
        take!(zero_timing);
        take!(slow_run_warn_secs);
    }
}

/// Defaults, overlaid with the config file, overlaid with CLI flags.
pub fn resolve_config(file: Option<&ConfigPatch>, flags: &ConfigPatch) -> RunConfig {
    let mut cfg = RunConfig::default();
    if let Some(f) = file {
        f.apply(&mut cfg);
    }
    flags.apply(&mut cfg);
    cfg
}

/// Reads and parses a config file.
pub fn load_config_file(path: &Path) -> Result<ConfigPatch> {
    let text = std::fs::read_to_string(path)?;
    ConfigPatch::parse_file(&text)
}
