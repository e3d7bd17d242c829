use std::path::Path;

use fedmesh_core::app::AppConfig;
use fedmesh_core::controller::StepSpec;
use fedmesh_ml::apps::{self, ModelFile, MODEL_FILE};
use fedmesh_ml::centralized::ols;
use fedmesh_ml::data::{ColumnSpec, Dataset};
use fedmesh_ml::registry;
use fedmesh_testbed::partition::{write_partitions, SplitPlan};
use fedmesh_testbed::sim::{run_simulation, SimConfig};
use fedmesh_testbed::synthetic::{linear, two_gaussians, SyntheticOptions};

fn step(app: &str, config: AppConfig) -> StepSpec {
    StepSpec { app: app.into(), config }
}

fn quick(config: &mut SimConfig, work: &Path) {
    config.poll_interval_ms = 2;
    config.repetitions = 1;
    config.work_dir = Some(work.to_path_buf());
}

#[test]
fn solo_linreg_matches_ols() {
    let dir = tempfile::tempdir().unwrap();
    let table = linear(&SyntheticOptions::new(120, 4, 3), 0.5);
    let dirs = write_partitions(&table, &SplitPlan::even(1), 1, &dir.path().join("data")).unwrap();
    let mut config = SimConfig::new(dirs.clone(), vec![step(apps::LINEAR_REGRESSION, AppConfig::new())]);
    quick(&mut config, &dir.path().join("runs"));
    let report = run_simulation(&config, &registry()).unwrap();
    assert!(report.all_succeeded(), "{}", report.to_table());
    let rep = &report.repetitions[0];
    let model = ModelFile::load(&rep.coordinator_output().unwrap().join(MODEL_FILE)).unwrap();
    let data = Dataset::read(&dirs[0].join("data.csv"), &ColumnSpec::default()).unwrap();
    let beta = ols(&data.design(true), &data.y).unwrap();
    for (a, b) in model.splits[0].beta.iter().zip(beta.iter()) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

#[test]
fn traffic_is_reproducible_and_matches_relay_counters() {
    let dir = tempfile::tempdir().unwrap();
    let table = two_gaussians(&SyntheticOptions::new(200, 4, 9), 0.8);
    let dirs = write_partitions(&table, &SplitPlan::parse("0.2,0.3,0.5").unwrap(), 2, &dir.path().join("data")).unwrap();
    let steps = vec![step(apps::LOGISTIC_REGRESSION, AppConfig::new())];
    let mut config = SimConfig::new(dirs, steps);
    quick(&mut config, &dir.path().join("runs"));
    config.repetitions = 2;
    config.record_transcript = true;
    let report = run_simulation(&config, &registry()).unwrap();
    assert!(report.all_succeeded(), "{}", report.to_table());
    let [a, b] = &report.repetitions[..] else { panic!("two repetitions") };
    assert_ne!(a.seed, b.seed);
    assert_eq!(a.traffic, b.traffic);
    for rep in [a, b] {
        let sent: u64 = rep.clients.iter().map(|c| c.bytes_sent).sum();
        let recorded: u64 = rep.transcript.iter().map(|e| e.encoded.len() as u64 * e.recipients.len() as u64).sum();
        assert_eq!(sent, recorded);
        let received: u64 = rep.clients.iter().map(|c| c.bytes_received).sum();
        assert_eq!(sent, received);
    }
}

#[test]
fn failing_client_yields_failed_report_with_logs() {
    let dir = tempfile::tempdir().unwrap();
    let table = linear(&SyntheticOptions::new(60, 2, 1), 0.1);
    let dirs = write_partitions(&table, &SplitPlan::even(2), 1, &dir.path().join("data")).unwrap();
    std::fs::write(dirs[1].join("data.csv"), "x0,x1,label\n1,oops,2\n").unwrap();
    let mut config = SimConfig::new(dirs, vec![step(apps::LINEAR_REGRESSION, AppConfig::new())]);
    quick(&mut config, &dir.path().join("runs"));
    let report = run_simulation(&config, &registry()).unwrap();
    assert_eq!(report.failures, 1);
    let rep = &report.repetitions[0];
    assert!(!rep.succeeded);
    assert!(rep.failure.as_deref().unwrap().contains("oops") || rep.clients.iter().any(|c| c.error.is_some()));
    assert!(rep.clients[1].run_dir.exists());
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = SimConfig::new(vec![dir.path().to_path_buf()], vec![step("nope", AppConfig::new())]);
    assert!(run_simulation(&config, &registry()).unwrap_err().is_config_error());
    config.workflow.steps = vec![step(apps::LINEAR_REGRESSION, AppConfig::new())];
    config.bandwidth_limit = Some(0);
    assert!(run_simulation(&config, &registry()).is_err());
    config.bandwidth_limit = None;
    config.n_clients = 2;
    assert!(run_simulation(&config, &registry()).is_err());
}

#[test]
fn yaml_config_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("a")).unwrap();
    let path = dir.path().join("sim.yaml");
    std::fs::write(
        &path,
        "n_clients: 1\ndata_dirs: [a]\nbandwidth_limit: 100000\nworkflow:\n  steps:\n    - app: linear_regression\n      config: {smpc: true}\n",
    )
    .unwrap();
    let config = SimConfig::from_file(&path).unwrap();
    assert_eq!(config.data_dirs[0], dir.path().join("a"));
    assert_eq!(config.poll_interval_ms, 3000);
    assert_eq!(config.repetitions, 10);
    assert_eq!(config.bandwidth_limit, Some(100_000));
}
