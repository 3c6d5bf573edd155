use slimsim::cli::{
    cmd_compare, cmd_simulate, cmd_sweep, cmd_train, CliError, RouterKind, BATCH_GRID,
    RUN_CHECKPOINT, RUN_CONFIG, RUN_CURVES_CSV, RUN_META, RUN_METRICS_CSV, RUN_RECORD,
    RUN_SUMMARY, RUN_TRACE_CSV,
};
use slimsim::config::ExperimentConfig;
use slimsim::device::DeviceSpec;
use slimsim::nn::Checkpoint;
use slimsim::sim::Horizon;
use std::path::Path;
use std::process::Command;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.cluster.devices = vec![DeviceSpec::fast_default(), DeviceSpec::slow_default()];
    cfg.workload.rate_per_s = 80.0;
    cfg.workload.horizon = Horizon::Seconds(0.5);
    cfg.ppo.window = 32;
    cfg.ppo.hidden = 8;
    cfg.ppo.updates = 2;
    cfg.validate().unwrap();
    cfg
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn simulate_writes_every_artifact_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config();
    let summary = cmd_simulate(&cfg, RouterKind::Random, None, None, true, &out).unwrap();
    assert!(summary.completed > 0);

    for name in [RUN_CONFIG, RUN_META, RUN_RECORD, RUN_METRICS_CSV, RUN_SUMMARY, RUN_TRACE_CSV] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let metrics = read(&out.join(RUN_METRICS_CSV));
    let mut lines = metrics.lines();
    let head = lines.next().unwrap();
    assert!(head.starts_with("# config "), "{head}");
    assert!(head.contains(&format!("seed {}", cfg.seed)), "{head}");
    assert_eq!(lines.next().unwrap(), "metric,mean,std");
    let metric_names: Vec<&str> =
        lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        metric_names,
        [
            "accuracy_pct",
            "latency_s",
            "energy_j",
            "util_variance",
            "throughput_completed",
            "throughput_per_s"
        ]
    );
    let text = read(&out.join(RUN_SUMMARY));
    for key in ["accuracy_pct", "latency_mean_s", "energy_std_j", "width_fractions"] {
        assert!(text.contains(key), "summary missing {key}:\n{text}");
    }
    let trace = read(&out.join(RUN_TRACE_CSV));
    assert!(trace.lines().count() > 2, "trace has no rows");
}

#[test]
fn simulate_same_seed_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cmd_simulate(&cfg, RouterKind::Random, None, Some(5), true, &a).unwrap();
    cmd_simulate(&cfg, RouterKind::Random, None, Some(5), true, &b).unwrap();
    for name in [RUN_METRICS_CSV, RUN_SUMMARY, RUN_RECORD, RUN_TRACE_CSV] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs");
    }

    let c = dir.path().join("c");
    cmd_simulate(&cfg, RouterKind::Random, None, Some(6), false, &c).unwrap();
    assert_ne!(read(&a.join(RUN_RECORD)), read(&c.join(RUN_RECORD)));
}

#[test]
fn simulate_ppo_without_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_simulate(
        &tiny_config(),
        RouterKind::Ppo,
        None,
        None,
        false,
        &dir.path().join("run"),
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Invalid(_)));
    assert!(err.to_string().contains("--checkpoint"), "{err}");
}

#[test]
fn train_zero_updates_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let mut cfg = tiny_config();
    cfg.ppo.updates = 0;
    let rows = cmd_train(&cfg, &out).unwrap();
    assert!(rows.is_empty());

    let saved = Checkpoint::load(&out.join(RUN_CHECKPOINT)).unwrap();
    let fresh = cfg.trainer().unwrap().checkpoint();
    assert_eq!(saved.theta, fresh.theta);
    assert_eq!(saved.layout, fresh.layout);

    let curves = read(&out.join(RUN_CURVES_CSV));
    assert_eq!(curves.lines().count(), 2, "expected provenance + header only:\n{curves}");
}

#[test]
fn train_curves_have_one_row_per_update() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let cfg = tiny_config();
    let rows = cmd_train(&cfg, &out).unwrap();
    assert_eq!(rows.len(), 2);
    let curves = read(&out.join(RUN_CURVES_CSV));
    assert_eq!(curves.lines().count(), 2 + 2);
    assert!(curves.lines().nth(1).unwrap().starts_with("update,mean_reward,"));
    assert!(out.join(RUN_CHECKPOINT).exists());
}

#[test]
fn sweep_covers_the_full_grid_once() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let cfg = tiny_config();
    let rows = cmd_sweep(&cfg, 0, &out).unwrap();
    assert_eq!(rows.len(), cfg.knobs.widths.len() * BATCH_GRID.len());

    let csv = read(&out);
    assert_eq!(csv.lines().count(), 2 + rows.len());
    for r in &rows {
        assert!(r.utilization >= 0.0 && r.utilization <= 1.0 + 1e-9);
        assert!(r.mean_latency_s > 0.0);
        assert!(r.mean_power_w > 0.0);
    }

    let err = cmd_sweep(&cfg, 9, &out).unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");
}

#[test]
fn compare_against_itself_is_all_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("base");
    let cfg = tiny_config();
    cmd_simulate(&cfg, RouterKind::Random, None, None, false, &run).unwrap();

    let out = dir.path().join("cmp");
    let report =
        cmd_compare(&cfg, &run, std::slice::from_ref(&run.clone()), Some(&out)).unwrap();
    assert_eq!(report.rows.len(), 2);
    let r = &report.rows[1];
    assert_eq!(r.latency_delta_pct, 0.0);
    assert_eq!(r.energy_delta_pct, 0.0);
    assert_eq!(r.accuracy_delta_pct, 0.0);
    assert_eq!(r.throughput_delta_pct, 0.0);
    assert!(r.latency_std_s >= 0.0);
    assert!(r.wall_span_s > 0.0);

    let csv = read(&out.join("compare.csv"));
    assert!(csv.lines().nth(1).unwrap().contains("latency_std_s"));
    assert!(out.join("records").join("baseline.json").exists());
    assert!(out.join("records").join("run-1.json").exists());
}

#[test]
fn compare_refuses_mismatched_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cmd_simulate(&cfg, RouterKind::Random, None, Some(1), false, &a).unwrap();
    cmd_simulate(&cfg, RouterKind::Random, None, Some(2), false, &b).unwrap();
    let err = cmd_compare(&cfg, &a, &[b], None).unwrap_err();
    assert!(err.to_string().contains("not comparable"), "{err}");
}

#[test]
fn binary_runs_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, tiny_config().to_toml_string()).unwrap();

    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_slimsim"))
            .args([
                "simulate",
                "--config",
                cfg_path.to_str().unwrap(),
                "--router",
                "random",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&a);
    run(&b);
    assert_eq!(read(&a.join(RUN_METRICS_CSV)), read(&b.join(RUN_METRICS_CSV)));
    assert_eq!(read(&a.join(RUN_SUMMARY)), read(&b.join(RUN_SUMMARY)));
}
