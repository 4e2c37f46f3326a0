//! Command-line entry point: `run` executes an experiment, `gen`
//! materializes a stream for inspection, `report` re-aggregates exported
//! JSON reports into one CSV.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use replay_bench::error::{Error, Result};
use replay_bench::harness::{
    self, export_csv, export_json, load_config_file, read_json, resolve_config, ConfigPatch,
    RunConfig,
};

#[derive(Parser)]
#[command(
    name = "replay-bench",
    version,
    about = "Replay-memory benchmark for class-incremental continual learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment and export its report.
    Run(RunArgs),
    /// Materialize one run's retained/merged dataset and stream manifest.
    Gen(GenArgs),
    /// Re-aggregate exported JSON reports into a combined CSV.
    Report(ReportArgs),
}

/// Flags mirroring the config fields; a flag overrides the config file,
/// which overrides the defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Plain `key = value` config file supplying defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// IDX directory or synthetic blob-spec file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// base | omniscient | realistic.
    #[arg(long)]
    scenario: Option<String>,
    /// reservoir | cbrs | dcbrs.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    replay_steps: Option<usize>,
    /// Merged class count, or `none` to disable merging.
    #[arg(long)]
    merge_target: Option<String>,
    /// Comma-separated retention factors, e.g. 0.01,0.05,0.1,0.3,1.
    #[arg(long)]
    retention: Option<String>,
    #[arg(long)]
    clusters_per_class: Option<usize>,
    #[arg(long)]
    refresh_interval: Option<usize>,
    #[arg(long)]
    kmeans_max_iters: Option<usize>,
    #[arg(long)]
    kmeans_tol: Option<f64>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Master seed; run seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// f32 | f64.
    #[arg(long)]
    precision: Option<String>,
    /// Write wall-clock fields as zero for bit-identical reports.
    #[arg(long)]
    zero_timing: bool,
    #[arg(long)]
    slow_run_warn_secs: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => Some(load_config_file(path)?),
            None => None,
        };
        let mut flags = ConfigPatch::default();
        flags.dataset.clone_from(&self.dataset);
        if let Some(s) = &self.scenario {
            flags.set("scenario", s)?;
        }
        if let Some(s) = &self.policy {
            flags.set("policy", s)?;
        }
        flags.memory_size = self.memory_size;
        flags.batch_size = self.batch_size;
        flags.replay_steps = self.replay_steps;
        if let Some(s) = &self.merge_target {
            flags.set("merge_target", s)?;
        }
        if let Some(s) = &self.retention {
            flags.set("retention", s)?;
        }
        flags.clusters_per_class = self.clusters_per_class;
        flags.refresh_interval = self.refresh_interval;
        flags.kmeans_max_iters = self.kmeans_max_iters;
        flags.kmeans_tol = self.kmeans_tol;
        flags.kmeans_restarts = self.kmeans_restarts;
        flags.lr = self.lr;
        flags.beta1 = self.beta1;
        flags.beta2 = self.beta2;
        flags.epsilon = self.epsilon;
        flags.seed = self.seed;
        flags.runs = self.runs;
        if let Some(s) = &self.precision {
            flags.set("precision", s)?;
        }
        if self.zero_timing {
            flags.zero_timing = Some(true);
        }
        flags.slow_run_warn_secs = self.slow_run_warn_secs;
        Ok(resolve_config(file.as_ref(), &flags))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output JSON report path.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also export a per-run CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for manifest.json and dataset.csv.
    #[arg(long, default_value = "manifest")]
    out: PathBuf,
    /// Which run of the experiment to materialize.
    #[arg(long, default_value_t = 0)]
    run_index: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Combined CSV output path.
    #[arg(long, default_value = "combined.csv")]
    out: PathBuf,
    /// JSON reports produced by `run`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn echo_config(cfg: &RunConfig, out: &std::path::Path) {
    println!(
        "dataset={} scenario={} policy={} seed={} out={}",
        cfg.dataset.display(),
        cfg.scenario.name(),
        cfg.policy.name(),
        cfg.seed,
        out.display()
    );
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    echo_config(&cfg, &args.out);
    let report = harness::run_experiment(&cfg)?;
    export_json(&report, &args.out)?;
    if let Some(csv) = &args.csv {
        export_csv(&[&report], csv)?;
    }
    match report.ci_half_width {
        Some(ci) => println!(
            "{}: mean accuracy {:.4} +/- {:.4} over {} runs",
            report.policy_label,
            report.mean_accuracy,
            ci,
            report.runs.len()
        ),
        None => println!(
            "{}: accuracy {:.4} (single run, no CI)",
            report.policy_label, report.mean_accuracy
        ),
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    echo_config(&cfg, &args.out);
    let (dataset, _, manifest) = harness::generate_manifest(&cfg, args.run_index)?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    harness::report::atomic_write(&args.out.join("manifest.json"), &manifest_bytes)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["id", "label", "sub_label"])?;
    for inst in &dataset.instances {
        wtr.write_record([
            inst.id.to_string(),
            inst.label.to_string(),
            inst.sub_label.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    harness::report::atomic_write(&args.out.join("dataset.csv"), &bytes)?;
    println!(
        "wrote {} batches over {} instances to {}",
        manifest.batches.len(),
        manifest.total_instances,
        args.out.display()
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let report = read_json(path)?;
        report.verify_aggregates()?;
        reports.push(report);
    }
    let refs: Vec<&_> = reports.iter().collect();
    export_csv(&refs, &args.out)?;
    println!(
        "combined {} reports into {}",
        reports.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
