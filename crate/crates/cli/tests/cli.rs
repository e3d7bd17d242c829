use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use fedmesh_ml::data::write_table;
use fedmesh_testbed::synthetic::{two_gaussians, SyntheticOptions};

fn fedmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmesh")).args(args).output().unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn write_dataset(dir: &Path) -> String {
    let csv = dir.join("data.csv");
    write_table(&csv, &two_gaussians(&SyntheticOptions::new(150, 3, 5), 1.0)).unwrap();
    csv.display().to_string()
}

#[test]
fn partition_then_run_with_relay_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_dataset(dir.path());
    let parts = dir.path().join("parts");
    let out = fedmesh(&["partition", "--csv", &csv, "--plan", "0.4,0.6", "--seed", "3", "--out", parts.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(parts.join("client_1/data.csv").exists() && parts.join("client_2/data.csv").exists());

    let port = free_port();
    let addr = format!("127.0.0.1:{port}");
    let mut relay = Command::new(env!("CARGO_BIN_EXE_fedmesh"))
        .args(["relay", "--listen", &addr])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let workflow = dir.path().join("wf.yaml");
    std::fs::write(
        &workflow,
        format!(
            "workflow_id: cli-test\ncredentials: s3cret\nrelay: \"{addr}\"\ncoordinator: client_1\nclients: [client_1, client_2]\npoll_interval_ms: 5\nsteps:\n  - app: logistic_regression\n    config: {{}}\n"
        ),
    )
    .unwrap();
    // give the relay a moment to bind
    std::thread::sleep(std::time::Duration::from_millis(300));

    let spawn = |role: &str, id: &str| {
        let data = parts.join(id);
        let run_dir = dir.path().join(format!("run-{id}"));
        Command::new(env!("CARGO_BIN_EXE_fedmesh"))
            .args(["run", "--workflow", workflow.to_str().unwrap(), "--data", data.to_str().unwrap()])
            .args(["--role", role, "--id", id, "--run-dir", run_dir.to_str().unwrap()])
            .output()
    };
    let (coord, part) = std::thread::scope(|s| {
        let c = s.spawn(|| spawn("coordinator", "client_1").unwrap());
        let p = s.spawn(|| spawn("participant", "client_2").unwrap());
        (c.join().unwrap(), p.join().unwrap())
    });
    relay.kill().unwrap();
    relay.wait().unwrap();
    assert!(coord.status.success(), "{}", String::from_utf8_lossy(&coord.stderr));
    assert!(part.status.success(), "{}", String::from_utf8_lossy(&part.stderr));

    let report = fedmesh(&["report", dir.path().join("run-client_1").to_str().unwrap()]);
    assert!(report.status.success());
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("\"workflow_id\": \"cli-test\""), "{text}");
    assert!(text.contains("logistic_regression"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_dataset(dir.path());
    let bad_plan = fedmesh(&["partition", "--csv", &csv, "--plan", "0.5,0.6", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(bad_plan.status.code(), Some(2));
    let missing = fedmesh(&["run", "--workflow", "/nonexistent.json", "--data", ".", "--role", "coordinator", "--relay", "127.0.0.1:1"]);
    assert_eq!(missing.status.code(), Some(2));
    let no_report = fedmesh(&["report", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(no_report.status.code(), Some(2));
    let unknown_model = fedmesh(&["compare", "--dataset", &csv, "--model", "svm"]);
    assert_eq!(unknown_model.status.code(), Some(2));
}

#[test]
fn unreachable_relay_is_a_workflow_failure() {
    let dir = tempfile::tempdir().unwrap();
    let workflow = dir.path().join("wf.json");
    std::fs::write(
        &workflow,
        r#"{"workflow_id":"w","coordinator":"a","clients":["a"],"steps":[{"app":"linear_regression","config":{}}]}"#,
    )
    .unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    let out = fedmesh(&["run", "--workflow", workflow.to_str().unwrap(), "--data", ".", "--role", "coordinator", "--relay", &addr]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_dataset(dir.path());
    let out_dir = dir.path().join("cmp");
    let out = fedmesh(&["compare", "--dataset", &csv, "--model", "linreg", "--folds", "3", "--clients", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["comparison.csv", "comparison.json", "summary.txt"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}
