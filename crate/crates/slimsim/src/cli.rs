//! Command-line front end: subcommand parsing, run directories, CSV and
//! summary emission, and checkpoint handling.
//!
//! Every CSV starts with a provenance comment line `# config <hash> seed
//! <seed>` followed by a header row, and all numbers use Rust's shortest
//! round-trip float formatting, so identical config + seed reruns produce
//! byte-identical files.

use crate::accuracy::AccuracyTable;
use crate::config::{ConfigError, ExperimentConfig};
use crate::metrics::{mean_std, MetricsRecord, RunSummary};
use crate::nn::Checkpoint;
use crate::ppo::{CurveRow, PpoError, PpoRouter, RouterMode};
use crate::sim::{
    Engine, FixedRouter, Horizon, RandomRouter, Router, SimError, TraceRow, WorkloadMode,
    WorkloadSpec,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Offered-load axis of the sweep: each point runs a closed loop of
/// `batch` clients with the batch cap set to match.
pub const BATCH_GRID: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
const SWEEP_THINK_S: f64 = 0.05;
const SWEEP_HORIZON_S: f64 = 10.0;
const SWEEP_WARMUP_S: f64 = 2.0;

pub const RUN_CONFIG: &str = "config.toml";
pub const RUN_META: &str = "run.json";
pub const RUN_RECORD: &str = "record.json";
pub const RUN_SUMMARY: &str = "summary.txt";
pub const RUN_METRICS_CSV: &str = "metrics.csv";
pub const RUN_TRACE_CSV: &str = "trace.csv";
pub const RUN_CURVES_CSV: &str = "curves.csv";
pub const RUN_CHECKPOINT: &str = "checkpoint.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("policy: {0}")]
    Ppo(#[from] PpoError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn provenance(hash: &str, seed: u64) -> String {
    format!("# config {hash} seed {seed}\n")
}

#[derive(Parser, Debug)]
#[command(
    name = "slimsim",
    version,
    about = "Event-driven simulator for width-slimmable inference clusters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RouterKind {
    /// Uniform-random server, requests keep their sampled widths.
    Random,
    /// Trained policy loaded from `--checkpoint`.
    Ppo,
}

impl RouterKind {
    fn label(self) -> &'static str {
        match self {
            RouterKind::Random => "random",
            RouterKind::Ppo => "ppo",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one episode and write the metric table into a run directory.
    Simulate {
        /// Config file path or preset name (default|overfit|balanced).
        #[arg(long)]
        config: String,
        #[arg(long, value_enum)]
        router: RouterKind,
        /// Saved policy, required with `--router ppo`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write per-tick telemetry rows.
        #[arg(long)]
        trace: bool,
        /// Run directory to (over)write.
        #[arg(long, default_value = "runs/simulate")]
        out: PathBuf,
    },
    /// Alternate collection and policy updates, then write the checkpoint
    /// and training curves.
    Train {
        /// Config file path or preset name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid one device over (width, batch) closed-loop load points.
    Sweep {
        /// Config file path or preset name.
        #[arg(long)]
        config: String,
        /// Index into the config's device list.
        #[arg(long)]
        device: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Diff simulate runs against a baseline run with the same seed.
    Compare {
        /// Config file path or preset name.
        #[arg(long)]
        config: String,
        /// Run directory of the baseline.
        #[arg(long)]
        baseline_run: PathBuf,
        /// Run directories to compare; repeatable.
        #[arg(long, required = true)]
        ppo_run: Vec<PathBuf>,
        /// Optional directory for the delta CSV and copied records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Provenance sidecar of a run directory; compare refuses runs whose
/// seeds disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub router: String,
    pub checkpoint: Option<String>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, router, checkpoint, seed, trace, out } => {
            let cfg = ExperimentConfig::resolve(&config)?;
            let summary =
                cmd_simulate(&cfg, router, checkpoint.as_deref(), seed, trace, &out)?;
            print!("{}", summary_text(&summary));
            println!("run written to {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::resolve(&config)?;
            let curves = cmd_train(&cfg, &out)?;
            if let Some(last) = curves.last() {
                println!(
                    "update {}: mean_reward {} epsilon {}",
                    last.update, last.mean_reward, last.epsilon
                );
            }
            println!("checkpoint and curves written to {}", out.display());
        }
        Command::Sweep { config, device, out } => {
            let cfg = ExperimentConfig::resolve(&config)?;
            let rows = cmd_sweep(&cfg, device, &out)?;
            println!("{} sweep points written to {}", rows.len(), out.display());
        }
        Command::Compare { config, baseline_run, ppo_run, out } => {
            let cfg = ExperimentConfig::resolve(&config)?;
            let report = cmd_compare(&cfg, &baseline_run, &ppo_run, out.as_deref())?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

/// One episode under the chosen router; writes config snapshot, metrics
/// CSV, structured summary, raw record, and optional telemetry.
pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    router: RouterKind,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
    trace: bool,
    out: &Path,
) -> Result<RunSummary, CliError> {
    let seed = seed.unwrap_or(cfg.seed);
    let mut workload = cfg.workload.clone();
    workload.seed = seed;

    let mut routed: Box<dyn Router> = match router {
        RouterKind::Random => {
            Box::new(RandomRouter { group_sizes: cfg.ppo.group_sizes.clone() })
        }
        RouterKind::Ppo => {
            let path = checkpoint.ok_or_else(|| {
                CliError::Invalid("--router ppo requires --checkpoint".into())
            })?;
            let ck = Checkpoint::load(path).map_err(|e| {
                CliError::Invalid(format!("checkpoint {}: {e}", path.display()))
            })?;
            Box::new(PpoRouter::from_checkpoint(
                &ck,
                cfg.knobs.widths.clone(),
                cfg.ppo.group_sizes.clone(),
                cfg.exploration,
                cfg.reward,
                cfg.resolved_prior_mean(),
                RouterMode::Eval,
            )?)
        }
    };

    let mut engine = Engine::new(
        &cfg.cluster.devices,
        &cfg.cluster.profile,
        &cfg.knobs,
        &workload,
        AccuracyTable::published(),
        routed.as_mut(),
    )?;
    if trace {
        engine.enable_trace();
    }
    let (record, rows) = engine.run_traced();
    let summary = record.summary();

    make_dir(out)?;
    let hash = cfg.content_hash();
    write_file(&out.join(RUN_CONFIG), &cfg.to_toml_string())?;
    let meta = RunMeta {
        config_hash: hash.clone(),
        seed,
        router: router.label().into(),
        checkpoint: checkpoint.map(|p| p.display().to_string()),
    };
    write_file(
        &out.join(RUN_META),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    write_file(
        &out.join(RUN_RECORD),
        &serde_json::to_string(&record).expect("record serializes"),
    )?;
    write_file(&out.join(RUN_METRICS_CSV), &metrics_csv(&summary, &record, &hash, seed))?;
    write_file(&out.join(RUN_SUMMARY), &summary_text(&summary))?;
    if trace {
        write_file(&out.join(RUN_TRACE_CSV), &trace_csv(&rows, &hash, seed))?;
    }
    Ok(summary)
}

/// The metric row set of the summary tables as a plot-ready CSV.
fn metrics_csv(summary: &RunSummary, record: &MetricsRecord, hash: &str, seed: u64) -> String {
    let mut s = provenance(hash, seed);
    s.push_str("metric,mean,std\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let _ = writeln!(s, "accuracy_pct,{},", opt(summary.accuracy.map(|a| a * 100.0)));
    let _ = writeln!(s, "latency_s,{},{}", opt(summary.latency_mean), opt(summary.latency_std));
    let _ = writeln!(s, "energy_j,{},{}", opt(summary.energy_mean), opt(summary.energy_std));
    let _ = writeln!(
        s,
        "util_variance,{},{}",
        opt(summary.util_var_mean),
        opt(summary.util_var_std)
    );
    let _ = writeln!(s, "throughput_completed,{},", record.completed);
    let _ = writeln!(s, "throughput_per_s,{},", opt(summary.throughput_per_s));
    s
}

/// Aligned key-value summary, one metric per line.
pub fn summary_text(summary: &RunSummary) -> String {
    let mut s = String::new();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into());
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k:<22}{v}");
    };
    line("completed", summary.completed.to_string());
    line("accuracy_pct", opt(summary.accuracy.map(|a| a * 100.0)));
    line("latency_mean_s", opt(summary.latency_mean));
    line("latency_std_s", opt(summary.latency_std));
    line("latency_p95_s", opt(summary.latency_p95));
    line("energy_mean_j", opt(summary.energy_mean));
    line("energy_std_j", opt(summary.energy_std));
    line("util_var_mean", opt(summary.util_var_mean));
    line("util_var_std", opt(summary.util_var_std));
    line("throughput_per_s", opt(summary.throughput_per_s));
    let widths = summary
        .width_fractions
        .iter()
        .map(|(w, f)| format!("{w}:{f}"))
        .collect::<Vec<_>>()
        .join(" ");
    line("width_fractions", if widths.is_empty() { "n/a".into() } else { widths });
    s
}

/// Telemetry rows in long format: one line per (tick, server).
fn trace_csv(rows: &[TraceRow], hash: &str, seed: u64) -> String {
    let mut s = provenance(hash, seed);
    s.push_str("time,server,queue_len,power_w,util,vram_bytes\n");
    for row in rows {
        for (i, sv) in row.servers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                row.time, i, sv.queue_len, sv.power_w, sv.util, sv.vram_bytes
            );
        }
    }
    s
}

/// Trains per the config's update budget; aborts on non-finite losses,
/// keeping the last finite checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CurveRow>, CliError> {
    let mut trainer = cfg.trainer()?;
    make_dir(out)?;
    let hash = cfg.content_hash();
    write_file(&out.join(RUN_CONFIG), &cfg.to_toml_string())?;

    let mut rows: Vec<CurveRow> = Vec::with_capacity(cfg.ppo.updates);
    let mut last_good = trainer.checkpoint();
    let mut diverged = None;
    for _ in 0..cfg.ppo.updates {
        let row = trainer.step()?;
        let finite = [row.mean_reward, row.l_clip, row.l_value, row.entropy]
            .iter()
            .all(|v| v.is_finite());
        rows.push(row.clone());
        if !finite {
            diverged = Some(row.update);
            break;
        }
        last_good = trainer.checkpoint();
    }

    let mut curves = provenance(&hash, cfg.seed);
    curves.push_str("update,mean_reward,l_clip,l_value,entropy,epsilon\n");
    for r in &rows {
        let _ = writeln!(
            curves,
            "{},{},{},{},{},{}",
            r.update, r.mean_reward, r.l_clip, r.l_value, r.entropy, r.epsilon
        );
    }
    write_file(&out.join(RUN_CURVES_CSV), &curves)?;
    let ck_path = out.join(RUN_CHECKPOINT);
    last_good
        .save(&ck_path)
        .map_err(|e| CliError::Invalid(format!("checkpoint {}: {e}", ck_path.display())))?;
    let meta = RunMeta {
        config_hash: hash,
        seed: cfg.seed,
        router: "train".into(),
        checkpoint: Some(RUN_CHECKPOINT.into()),
    };
    write_file(
        &out.join(RUN_META),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;

    if let Some(update) = diverged {
        return Err(CliError::Invalid(format!(
            "training diverged (non-finite loss) at update {update}; last finite checkpoint kept at {}",
            ck_path.display()
        )));
    }
    Ok(rows)
}

/// One measured grid point of the device sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub width: f64,
    pub batch: usize,
    pub utilization: f64,
    pub mean_latency_s: f64,
    pub mean_power_w: f64,
}

/// Closed-loop load grid over (width, batch) on one device: `batch`
/// looping clients, the batch cap set to match, a point-mass width
/// demand, and warmup discarded.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    device: usize,
    out: &Path,
) -> Result<Vec<SweepRow>, CliError> {
    let spec = cfg.cluster.devices.get(device).ok_or_else(|| {
        CliError::Invalid(format!(
            "--device {device} out of range: config lists {} devices",
            cfg.cluster.devices.len()
        ))
    })?;
    let devices = vec![spec.clone()];
    let mut rows = Vec::with_capacity(cfg.knobs.widths.len() * BATCH_GRID.len());
    for (wi, w) in cfg.knobs.widths.iter().enumerate() {
        for &batch in &BATCH_GRID {
            let mut knobs = cfg.knobs.clone();
            knobs.batch_max = batch;
            let mut width_demand = vec![0.0; cfg.knobs.widths.len()];
            width_demand[wi] = 1.0;
            let workload = WorkloadSpec {
                horizon: Horizon::Seconds(SWEEP_HORIZON_S),
                width_demand,
                seed: cfg.seed,
                mode: WorkloadMode::Closed { clients: batch, think_s: SWEEP_THINK_S },
                warmup_s: SWEEP_WARMUP_S,
                ..cfg.workload.clone()
            };
            let mut router = FixedRouter { server: 0 };
            let mut engine = Engine::new(
                &devices,
                &cfg.cluster.profile,
                &knobs,
                &workload,
                AccuracyTable::published(),
                &mut router,
            )?;
            engine.enable_trace();
            let (record, trace) = engine.run_traced();
            let post: Vec<&TraceRow> =
                trace.iter().filter(|r| r.time >= SWEEP_WARMUP_S).collect();
            if post.is_empty() || record.latency_samples.is_empty() {
                return Err(CliError::Invalid(format!(
                    "sweep point width {} batch {batch} produced no post-warmup samples",
                    f64::from(w)
                )));
            }
            let n = post.len() as f64;
            let utilization = post.iter().map(|r| r.servers[0].util).sum::<f64>() / n;
            let mean_power_w = post.iter().map(|r| r.servers[0].power_w).sum::<f64>() / n;
            let (mean_latency_s, _) =
                mean_std(&record.latency_samples).expect("non-empty checked above");
            rows.push(SweepRow {
                width: f64::from(w),
                batch,
                utilization,
                mean_latency_s,
                mean_power_w,
            });
        }
    }

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            make_dir(dir)?;
        }
    }
    let mut csv = provenance(&cfg.content_hash(), cfg.seed);
    csv.push_str("width,batch,utilization,mean_latency_s,mean_power_w\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.width, r.batch, r.utilization, r.mean_latency_s, r.mean_power_w
        );
    }
    write_file(out, &csv)?;
    Ok(rows)
}

/// One run's absolute metrics plus percentage deltas against the
/// baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub latency_mean_s: f64,
    pub latency_std_s: f64,
    pub energy_mean_j: f64,
    pub energy_std_j: f64,
    pub accuracy_pct: f64,
    pub throughput_completed: u64,
    pub throughput_per_s: f64,
    pub wall_span_s: f64,
    pub latency_delta_pct: f64,
    pub energy_delta_pct: f64,
    pub accuracy_delta_pct: f64,
    pub throughput_delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    /// Fixed-width text table, baseline row first.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24}{:>14}{:>14}{:>13}{:>13}{:>11}{:>12}{:>12}{:>11}",
            "run",
            "latency_s",
            "lat_delta%",
            "energy_j",
            "en_delta%",
            "acc_pct",
            "acc_delta%",
            "throughput",
            "wall_s"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24}{:>14}{:>14}{:>13}{:>13}{:>11}{:>12}{:>12}{:>11}",
                r.run,
                format!("{:.6}", r.latency_mean_s),
                format!("{:+.2}", r.latency_delta_pct),
                format!("{:.4}", r.energy_mean_j),
                format!("{:+.2}", r.energy_delta_pct),
                format!("{:.2}", r.accuracy_pct),
                format!("{:+.2}", r.accuracy_delta_pct),
                r.throughput_completed,
                format!("{:.2}", r.wall_span_s)
            );
        }
        s
    }
}

fn load_run(dir: &Path) -> Result<(RunMeta, MetricsRecord), CliError> {
    let meta: RunMeta = serde_json::from_str(&read_file(&dir.join(RUN_META))?)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", dir.join(RUN_META).display())))?;
    let record: MetricsRecord = serde_json::from_str(&read_file(&dir.join(RUN_RECORD))?)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", dir.join(RUN_RECORD).display())))?;
    Ok((meta, record))
}

fn compare_stats(run: String, record: &MetricsRecord) -> Result<CompareRow, CliError> {
    let need = |samples: &[f64], what: &str| {
        mean_std(samples)
            .map_err(|_| CliError::Invalid(format!("{run}: no {what} samples to compare")))
    };
    let (latency_mean_s, latency_std_s) = need(&record.latency_samples, "latency")?;
    let (energy_mean_j, energy_std_j) = need(&record.energy_samples, "energy")?;
    if record.completed == 0 {
        return Err(CliError::Invalid(format!("{run}: no completed requests to compare")));
    }
    let accuracy_pct = record.correct as f64 / record.completed as f64 * 100.0;
    Ok(CompareRow {
        run,
        latency_mean_s,
        latency_std_s,
        energy_mean_j,
        energy_std_j,
        accuracy_pct,
        throughput_completed: record.completed,
        throughput_per_s: record.completed as f64 / record.sim_span,
        wall_span_s: record.sim_span,
        latency_delta_pct: 0.0,
        energy_delta_pct: 0.0,
        accuracy_delta_pct: 0.0,
        throughput_delta_pct: 0.0,
    })
}

/// Percentage deltas of each run against the baseline; refuses runs whose
/// workload seeds differ (not comparable).
pub fn cmd_compare(
    _cfg: &ExperimentConfig,
    baseline: &Path,
    runs: &[PathBuf],
    out: Option<&Path>,
) -> Result<CompareReport, CliError> {
    let (base_meta, base_record) = load_run(baseline)?;
    let base = compare_stats(baseline.display().to_string(), &base_record)?;

    let mut rows = vec![base.clone()];
    let mut records = vec![(baseline.display().to_string(), base_record)];
    for dir in runs {
        let (meta, record) = load_run(dir)?;
        if meta.seed != base_meta.seed {
            return Err(CliError::Invalid(format!(
                "{}: seed {} differs from baseline seed {}; runs are not comparable",
                dir.display(),
                meta.seed,
                base_meta.seed
            )));
        }
        let mut row = compare_stats(dir.display().to_string(), &record)?;
        let pct = |v: f64, b: f64| (v - b) / b * 100.0;
        row.latency_delta_pct = pct(row.latency_mean_s, base.latency_mean_s);
        row.energy_delta_pct = pct(row.energy_mean_j, base.energy_mean_j);
        row.accuracy_delta_pct = pct(row.accuracy_pct, base.accuracy_pct);
        row.throughput_delta_pct =
            pct(row.throughput_completed as f64, base.throughput_completed as f64);
        rows.push(row);
        records.push((dir.display().to_string(), record));
    }

    let report = CompareReport { rows };
    if let Some(dir) = out {
        make_dir(dir)?;
        let mut csv = provenance(&base_meta.config_hash, base_meta.seed);
        csv.push_str(
            "run,latency_mean_s,latency_std_s,latency_delta_pct,energy_mean_j,energy_std_j,\
             energy_delta_pct,accuracy_pct,accuracy_delta_pct,throughput_completed,\
             throughput_per_s,throughput_delta_pct,wall_span_s\n",
        );
        for r in &report.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.run,
                r.latency_mean_s,
                r.latency_std_s,
                r.latency_delta_pct,
                r.energy_mean_j,
                r.energy_std_j,
                r.energy_delta_pct,
                r.accuracy_pct,
                r.accuracy_delta_pct,
                r.throughput_completed,
                r.throughput_per_s,
                r.throughput_delta_pct,
                r.wall_span_s
            );
        }
        write_file(&dir.join("compare.csv"), &csv)?;
        let rec_dir = dir.join("records");
        make_dir(&rec_dir)?;
        for (i, (_, record)) in records.iter().enumerate() {
            let name = if i == 0 { "baseline.json".into() } else { format!("run-{i}.json") };
            write_file(
                &rec_dir.join(name),
                &serde_json::to_string(record).expect("record serializes"),
            )?;
        }
    }
    Ok(report)
}
