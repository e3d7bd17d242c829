use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fedmesh_core::app::{App, AppConfig, AppError, AppResult, Local, RoundAlgorithm, RoundApp, SetupContext};
use fedmesh_core::controller::{run_workflow, AppRegistry, RunOptions, RunReport, RunStatus, StepSpec, WorkflowSpec};
use fedmesh_core::protocol::ClientId;
use fedmesh_core::relay::server::{RelayOptions, RelayServer};
use fedmesh_core::smpc::{AdditiveModel, SecureApp};

/// Loops `rounds` times summing one number per client, then copies its
/// input files and writes the final sum.
struct Looper {
    rounds: usize,
    seen: usize,
    value: u64,
    last: u64,
    input: PathBuf,
    fail_on_setup: bool,
}

impl RoundAlgorithm for Looper {
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        if self.fail_on_setup {
            return Err(AppError::Setup("configured to crash".into()));
        }
        self.input = ctx.input_dir.clone();
        self.value = ctx.config.u64_or("value", 1)?;
        Ok(())
    }

    fn local(&mut self, global: Option<&[u8]>) -> AppResult<Local> {
        if let Some(g) = global {
            self.seen += 1;
            self.last = u64::from_be_bytes(g.try_into().unwrap());
        }
        Ok(if self.seen == self.rounds { Local::Done } else { Local::Send(self.value.to_be_bytes().to_vec()) })
    }

    fn aggregate(&mut self, locals: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
        let sum: u64 = locals.iter().map(|(_, b)| u64::from_be_bytes(b[..].try_into().unwrap())).sum();
        Ok(sum.to_be_bytes().to_vec())
    }

    fn write_output(&mut self, out: &Path) -> AppResult<()> {
        for entry in std::fs::read_dir(&self.input).unwrap() {
            let entry = entry.unwrap();
            if entry.file_type().unwrap().is_file() {
                std::fs::copy(entry.path(), out.join(entry.file_name())).unwrap();
            }
        }
        std::fs::write(out.join("sum.txt"), self.last.to_string()).map_err(|e| AppError::io(out, e))
    }
}

fn looper(config: &AppConfig, fail: bool) -> Box<dyn App> {
    let rounds = config.usize_or("rounds", 1).unwrap();
    Box::new(RoundApp::new(Looper { rounds, seen: 0, value: 0, last: 0, input: PathBuf::new(), fail_on_setup: fail }))
}

/// Writes nothing at all.
struct Silent;

impl RoundAlgorithm for Silent {
    fn load(&mut self, _: &SetupContext) -> AppResult<()> {
        Ok(())
    }
    fn local(&mut self, _: Option<&[u8]>) -> AppResult<Local> {
        Ok(Local::Done)
    }
    fn aggregate(&mut self, _: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
        Ok(Vec::new())
    }
    fn write_output(&mut self, _: &Path) -> AppResult<()> {
        Ok(())
    }
}

struct Summer {
    value: f64,
    rounds: usize,
    seen: usize,
    last: f64,
}

impl AdditiveModel for Summer {
    fn tag(&self) -> [u8; 4] {
        *b"SUMR"
    }
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        self.value = ctx.config.f64_or("value", 1.0)?;
        Ok(())
    }
    fn local_stats(&mut self, global: Option<&[u8]>) -> AppResult<Option<Vec<f64>>> {
        if let Some(g) = global {
            self.seen += 1;
            self.last = f64::from_be_bytes(g.try_into().unwrap());
        }
        Ok((self.seen < self.rounds).then_some(vec![self.value, 1.0]))
    }
    fn combine(&mut self, sum: Vec<f64>) -> AppResult<Vec<u8>> {
        Ok(sum[0].to_be_bytes().to_vec())
    }
    fn write_output(&mut self, out: &Path) -> AppResult<()> {
        std::fs::write(out.join("sum.txt"), self.last.to_string()).map_err(|e| AppError::io(out, e))
    }
}

fn registry() -> AppRegistry {
    let mut r = AppRegistry::with_builtins();
    r.register("loop", |c| Ok(looper(c, false)));
    r.register("crash", |c| Ok(looper(c, true)));
    r.register("silent", |_| Ok(Box::new(RoundApp::new(Silent))));
    r.register("secure_sum", |c| {
        let rounds = c.usize_or("rounds", 1)?;
        Ok(Box::new(SecureApp::new(Summer { value: 0.0, rounds, seen: 0, last: 0.0 })))
    });
    r
}

fn spec(wf: &str, n: usize, steps: Vec<(&str, AppConfig)>) -> WorkflowSpec {
    let clients: Vec<ClientId> = (0..n).map(|i| ClientId::from(format!("c{i}").as_str())).collect();
    WorkflowSpec {
        workflow_id: wf.into(),
        credentials: "pw".into(),
        relay: None,
        coordinator: clients[0].clone(),
        clients,
        seed: 1,
        poll_interval_ms: Some(2),
        step_timeout_secs: Some(30),
        steps: steps.into_iter().map(|(app, config)| StepSpec { app: app.into(), config }).collect(),
    }
}

/// Runs every client in its own thread; returns reports in client order.
fn run_all(relay: &RelayServer, spec: &WorkflowSpec, root: &Path, per_client: impl Fn(usize, &mut AppConfig)) -> Vec<RunReport> {
    let registry = Arc::new(registry());
    let handles: Vec<_> = spec
        .clients
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut spec = spec.clone();
            for step in &mut spec.steps {
                per_client(i, &mut step.config);
            }
            let data = root.join(format!("data_{i}"));
            std::fs::create_dir_all(&data).unwrap();
            std::fs::write(data.join("raw.csv"), format!("x,y\n{i},1\n")).unwrap();
            let mut opts = RunOptions::new(id.clone(), relay.local_addr(), data, root.join(format!("run_{i}")));
            opts.join_timeout = Duration::from_secs(10);
            let registry = registry.clone();
            thread::spawn(move || run_workflow(&spec, &registry, &opts).unwrap())
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

#[test]
fn iterative_app_moves_one_upload_and_one_broadcast_per_round() {
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = 4;
    let spec = spec("iter", 3, vec![("loop", AppConfig::new().with("rounds", t))]);
    let reports = run_all(&relay, &spec, dir.path(), |i, c| c.set_default("value", i as u64 + 1));
    for r in &reports {
        assert_eq!(r.status, RunStatus::Success, "{r:?}");
        let sum = std::fs::read_to_string(r.final_output().unwrap().join("sum.txt")).unwrap();
        assert_eq!(sum, "6");
    }
    let traffic = reports[0].traffic.clone().expect("coordinator receives the report");
    assert_eq!(reports[1].traffic.as_ref(), Some(&traffic));
    for p in ["c1", "c2"] {
        let tr = traffic[&ClientId::from(p)];
        // T uploads plus the step_done notice; T broadcasts plus start and step_complete.
        assert_eq!(tr.frames_out, t as u64 + 1);
        assert_eq!(tr.frames_in, t as u64 + 2);
    }
    let total_out: u64 = traffic.values().map(|t| t.bytes_out).sum();
    let total_in: u64 = traffic.values().map(|t| t.bytes_in).sum();
    assert_eq!(total_out, total_in);
}

#[test]
fn non_iterative_app_uses_two_legs_per_participant() {
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions { record_transcript: true, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = spec("once", 2, vec![("loop", AppConfig::new())]);
    let reports = run_all(&relay, &spec, dir.path(), |_, _| {});
    assert!(reports.iter().all(|r| r.status.is_success()));
    let data_frames = relay
        .transcript("once")
        .into_iter()
        .filter(|e| e.kind != fedmesh_core::FrameKind::Control)
        .count();
    assert_eq!(data_frames, 2);
}

#[test]
fn steps_chain_outputs_into_inputs() {
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = spec("chain", 2, vec![("loop", AppConfig::new()), ("loop", AppConfig::new().with("rounds", 2))]);
    let reports = run_all(&relay, &spec, dir.path(), |_, _| {});
    for (i, r) in reports.iter().enumerate() {
        assert!(r.status.is_success(), "{r:?}");
        let step0 = &r.steps[0].output_dir;
        let step1 = &r.steps[1].output_dir;
        // Step 1 copied everything it saw, including step 0's files.
        let raw = std::fs::read(dir.path().join(format!("data_{i}/raw.csv"))).unwrap();
        assert_eq!(std::fs::read(step0.join("raw.csv")).unwrap(), raw);
        assert_eq!(std::fs::read(step1.join("raw.csv")).unwrap(), raw);
        assert_eq!(std::fs::read_to_string(step1.join("sum.txt")).unwrap(), "2");
        assert!(std::fs::metadata(step0.join("sum.txt")).unwrap().permissions().readonly());
        assert!(step0.parent().unwrap().join("app.log").exists());
    }
}

#[test]
fn crash_in_second_step_keeps_first_outputs() {
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = spec("crash", 2, vec![("loop", AppConfig::new()), ("crash", AppConfig::new())]);
    let reports = run_all(&relay, &spec, dir.path(), |_, _| {});
    for r in &reports {
        match &r.status {
            RunStatus::Failed { step, .. } => assert_eq!(*step, 1),
            other => panic!("expected failure, got {other:?}"),
        }
        assert!(r.steps[0].output_dir.join("sum.txt").exists());
        assert_eq!(RunReport::load(r.steps[0].output_dir.parent().unwrap().parent().unwrap()).unwrap(), *r);
    }
}

#[test]
fn empty_output_fails_next_step_with_no_input() {
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = spec("empty", 1, vec![("silent", AppConfig::new()), ("loop", AppConfig::new())]);
    let reports = run_all(&relay, &spec, dir.path(), |_, _| {});
    match &reports[0].status {
        RunStatus::Failed { step: 1, reason } => assert!(reason.contains("no input"), "{reason}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn solo_client_runs_without_peers() {
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = spec("solo", 1, vec![("loop", AppConfig::new().with("rounds", 3).with("value", 5))]);
    let reports = run_all(&relay, &spec, dir.path(), |_, _| {});
    assert!(reports[0].status.is_success());
    let sum = std::fs::read_to_string(reports[0].final_output().unwrap().join("sum.txt")).unwrap();
    assert_eq!(sum, "5");
}

#[test]
fn secure_sum_over_the_relay() {
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions { record_transcript: true, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let n = 4;
    let spec = spec("smpc", n, vec![("secure_sum", AppConfig::new().with("rounds", 2))]);
    let reports = run_all(&relay, &spec, dir.path(), |i, c| c.set_default("value", 0.25 * i as f64));
    for r in &reports {
        assert!(r.status.is_success(), "{r:?}");
        let sum: f64 = std::fs::read_to_string(r.final_output().unwrap().join("sum.txt")).unwrap().parse().unwrap();
        assert!((sum - 1.5).abs() <= n as f64 * 2f64.powi(-24));
    }
}

#[test]
fn role_mismatch_and_unknown_app_are_config_errors() {
    let registry = registry();
    let mut s = spec("cfg", 2, vec![("nope", AppConfig::new())]);
    let opts = RunOptions::new("c0".into(), "127.0.0.1:9".parse().unwrap(), ".", "target/never");
    assert!(run_workflow(&s, &registry, &opts).unwrap_err().is_config_error());
    s.steps[0].app = "loop".into();
    let mut opts = opts;
    opts.role = Some(fedmesh_core::Role::Participant);
    assert!(run_workflow(&s, &registry, &opts).unwrap_err().is_config_error());
    opts.client_id = "stranger".into();
    assert!(run_workflow(&s, &registry, &opts).unwrap_err().is_config_error());
}

#[test]
fn participant_disconnect_fails_the_step() {
    use fedmesh_core::link::{ConnectOptions, RelayClient};
    let relay = RelayServer::bind("127.0.0.1:0", RelayOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = spec("drop", 2, vec![("loop", AppConfig::new().with("rounds", 1000))]);
    let addr = relay.local_addr();
    let dropper = thread::spawn(move || {
        let client = RelayClient::connect(
            addr,
            ConnectOptions {
                workflow_id: "drop".into(),
                credentials: "pw".into(),
                client_id: "c1".into(),
                role: fedmesh_core::Role::Participant,
                bandwidth_limit: None,
                register_timeout: Duration::from_secs(10),
            },
        )
        .unwrap();
        let start = client.recv_timeout(Duration::from_secs(10)).unwrap().unwrap();
        assert_eq!(start.control_verb(), Some("start"));
        drop(client);
    });
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::write(data.join("raw.csv"), "x\n1\n").unwrap();
    let opts = RunOptions::new("c0".into(), addr, data, dir.path().join("run"));
    let report = run_workflow(&spec, &registry(), &opts).unwrap();
    dropper.join().unwrap();
    match report.status {
        RunStatus::Failed { step: 0, reason } => assert!(reason.contains("lost its relay connection"), "{reason}"),
        other => panic!("unexpected {other:?}"),
    }
}
