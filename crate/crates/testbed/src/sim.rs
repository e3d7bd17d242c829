//! Runs one relay and N controllers in this process, repeatedly, and
//! collects traffic, timing and the final evaluation of every run.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use fedmesh_core::controller::{run_workflow, AppRegistry, RunOptions, RunReport, RunStatus, StepSpec, WorkflowSpec};
use fedmesh_core::protocol::{ClientId, Role};
use fedmesh_core::relay::server::{RelayOptions, RelayServer};
use fedmesh_core::relay::{TrafficReport, TranscriptEntry};
use fedmesh_ml::apps::{EvaluationReport, EVALUATION_FILE};
use fedmesh_ml::rng::{derive_seed, hash_str};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::stats::Quartiles;
use crate::{TestbedError, TestbedResult};

pub const MAX_CLIENTS: usize = 64;

fn default_poll() -> u64 {
    3000
}

fn default_repetitions() -> usize {
    10
}

fn yes() -> bool {
    true
}

/// Steps to run; ids, coordinator and seeds are filled in per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTemplate {
    pub steps: Vec<StepSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_clients: usize,
    pub data_dirs: Vec<PathBuf>,
    pub workflow: WorkflowTemplate,
    #[serde(default = "default_poll")]
    pub poll_interval_ms: u64,
    /// Draw every poll interval from 0.5 to 1.5 times the nominal one, so
    /// that clients do not poll in lockstep.
    #[serde(default = "yes")]
    pub poll_jitter: bool,
    /// Bytes per second on every client uplink and relay downlink.
    #[serde(default)]
    pub bandwidth_limit: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Where run directories go; a temporary directory when absent.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    #[serde(default)]
    pub record_transcript: bool,
    #[serde(default)]
    pub step_timeout_secs: Option<u64>,
}

impl SimConfig {
    pub fn new(data_dirs: Vec<PathBuf>, steps: Vec<StepSpec>) -> Self {
        Self {
            n_clients: data_dirs.len(),
            data_dirs,
            workflow: WorkflowTemplate { steps },
            poll_interval_ms: default_poll(),
            poll_jitter: true,
            bandwidth_limit: None,
            seed: 0,
            repetitions: default_repetitions(),
            work_dir: None,
            record_transcript: false,
            step_timeout_secs: None,
        }
    }

    /// Reads JSON, or YAML for `.yaml`/`.yml` files. Relative data and
    /// work directories resolve against the file's directory.
    pub fn from_file(path: &Path) -> TestbedResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TestbedError::io(path, e))?;
        let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
        let mut config: SimConfig = if yaml {
            serde_yaml::from_str(&text).map_err(|e| TestbedError::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| TestbedError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for d in config.data_dirs.iter_mut().chain(config.work_dir.as_mut()) {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(config)
    }

    pub fn validate(&self, registry: &AppRegistry) -> TestbedResult<()> {
        let bad = |m: String| Err(TestbedError::Config(m));
        if !(1..=MAX_CLIENTS).contains(&self.n_clients) {
            return bad(format!("n_clients must be in 1..={MAX_CLIENTS}, got {}", self.n_clients));
        }
        if self.data_dirs.len() != self.n_clients {
            return bad(format!("{} data directories for {} clients", self.data_dirs.len(), self.n_clients));
        }
        if self.bandwidth_limit == Some(0) {
            return bad("bandwidth_limit must be positive".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        for d in &self.data_dirs {
            if !d.is_dir() {
                return bad(format!("data directory {} does not exist", d.display()));
            }
        }
        self.workflow_spec("check", 0).validate(registry).map_err(|e| TestbedError::Config(e.to_string()))
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        (0..self.n_clients).map(client_id).collect()
    }

    fn workflow_spec(&self, workflow_id: &str, seed: u64) -> WorkflowSpec {
        let clients = self.client_ids();
        WorkflowSpec {
            workflow_id: workflow_id.into(),
            credentials: format!("{workflow_id}-secret"),
            relay: None,
            coordinator: clients[0].clone(),
            clients,
            seed,
            poll_interval_ms: Some(self.poll_interval_ms),
            step_timeout_secs: self.step_timeout_secs,
            steps: self.workflow.steps.clone(),
        }
    }
}

/// Client `i` is `client_<i+1>`; the first one coordinates.
pub fn client_id(i: usize) -> ClientId {
    ClientId::from(format!("client_{}", i + 1).as_str())
}

/// Seed of repetition `r`; the first repetition uses the master seed.
pub fn repetition_seed(master: u64, r: usize) -> u64 {
    if r == 0 {
        master
    } else {
        derive_seed(master, &[r as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRun {
    pub client_id: ClientId,
    pub role: Role,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub step_seconds: Vec<f64>,
    pub total_seconds: f64,
    pub run_dir: PathBuf,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Repetition {
    pub index: usize,
    pub seed: u64,
    pub workflow_id: String,
    pub succeeded: bool,
    pub failure: Option<String>,
    /// Wall time from launching the clients until all of them returned.
    pub wall_seconds: f64,
    pub clients: Vec<ClientRun>,
    pub traffic: TrafficReport,
    /// Aggregated evaluation from the coordinator's last step, if any.
    pub evaluation: Option<EvaluationReport>,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEntry>,
}

impl Repetition {
    pub fn coordinator_output(&self) -> Option<PathBuf> {
        self.clients.first().and_then(|c| RunReport::load(&c.run_dir).ok()).and_then(|r| r.final_output().map(Path::to_path_buf))
    }

    /// Output directory of step `index` for client `i`.
    pub fn step_output(&self, i: usize, index: usize) -> Option<PathBuf> {
        let report = RunReport::load(&self.clients.get(i)?.run_dir).ok()?;
        report.steps.get(index).map(|s| s.output_dir.clone())
    }

    pub fn mean_participant_bytes(&self) -> f64 {
        let parts: Vec<_> = self.clients.iter().filter(|c| c.role == Role::Participant).collect();
        if parts.is_empty() {
            return f64::NAN;
        }
        parts.iter().map(|c| (c.bytes_sent + c.bytes_received) as f64).sum::<f64>() / parts.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub n_clients: usize,
    pub bandwidth_limit: Option<u64>,
    pub repetitions: Vec<Repetition>,
    pub wall_seconds: Quartiles,
    pub participant_bytes: Quartiles,
    pub failures: usize,
}

impl SimReport {
    pub fn all_succeeded(&self) -> bool {
        self.failures == 0
    }

    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let limit = self.bandwidth_limit.map_or("unlimited".to_string(), |l| format!("{l} B/s"));
        let _ = writeln!(out, "{} clients, bandwidth {limit}, {} repetitions, {} failed", self.n_clients, self.repetitions.len(), self.failures);
        let _ = writeln!(out, "{:<5} {:>12} {:>10} {:>18} {:>12}", "rep", "seed", "seconds", "participant bytes", "status");
        for r in &self.repetitions {
            let status = if r.succeeded { "ok".to_string() } else { format!("failed: {}", r.failure.as_deref().unwrap_or("?")) };
            let _ = writeln!(out, "{:<5} {:>12} {:>10.3} {:>18.0} {:>12}", r.index, r.seed, r.wall_seconds, r.mean_participant_bytes(), status);
        }
        let q = |q: &Quartiles| format!("median {:.3} (q1 {:.3}, q3 {:.3})", q.median, q.q1, q.q3);
        let _ = writeln!(out, "wall seconds: {}", q(&self.wall_seconds));
        let _ = writeln!(out, "participant bytes: {}", q(&self.participant_bytes));
        if let Some(eval) = self.repetitions.iter().rev().find_map(|r| r.evaluation.as_ref()) {
            for (k, v) in &eval.mean {
                let _ = writeln!(out, "{k}: {v:.6}");
            }
        }
        out
    }
}

/// Runs the configured workflow `repetitions` times.
pub fn run_simulation(config: &SimConfig, registry: &AppRegistry) -> TestbedResult<SimReport> {
    config.validate(registry)?;
    let temp;
    let work_dir = match &config.work_dir {
        Some(d) => d.clone(),
        None => {
            temp = tempfile::tempdir().map_err(|e| TestbedError::io(std::env::temp_dir(), e))?;
            temp.path().to_path_buf()
        }
    };
    let registry = Arc::new(registry.clone());
    let mut repetitions = Vec::new();
    for r in 0..config.repetitions {
        let rep = run_once(config, &registry, r, &work_dir.join(format!("rep_{r}")))?;
        info!("repetition {r}: {:.3} s, {}", rep.wall_seconds, if rep.succeeded { "ok" } else { "failed" });
        repetitions.push(rep);
    }
    let ok: Vec<&Repetition> = repetitions.iter().filter(|r| r.succeeded).collect();
    let wall: Vec<f64> = ok.iter().map(|r| r.wall_seconds).collect();
    let bytes: Vec<f64> = ok.iter().map(|r| r.mean_participant_bytes()).collect();
    Ok(SimReport {
        n_clients: config.n_clients,
        bandwidth_limit: config.bandwidth_limit,
        failures: repetitions.len() - ok.len(),
        wall_seconds: Quartiles::of(&wall),
        participant_bytes: Quartiles::of(&bytes),
        repetitions,
    })
}

fn run_once(config: &SimConfig, registry: &Arc<AppRegistry>, index: usize, dir: &Path) -> TestbedResult<Repetition> {
    let seed = repetition_seed(config.seed, index);
    let workflow_id = format!("sim-{seed:016x}-{index}");
    let spec = config.workflow_spec(&workflow_id, seed);
    let relay = RelayServer::bind(
        "127.0.0.1:0",
        RelayOptions { bandwidth_limit: config.bandwidth_limit, record_transcript: config.record_transcript },
    )
    .map_err(|e| TestbedError::Failed(format!("cannot start relay: {e}")))?;

    let started = Instant::now();
    let handles: Vec<_> = spec
        .clients
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut opts = RunOptions::new(id.clone(), relay.local_addr(), &config.data_dirs[i], dir.join(id.as_str()));
            opts.bandwidth_limit = config.bandwidth_limit;
            opts.join_timeout = Duration::from_secs(30);
            opts.poll_jitter = config.poll_jitter.then(|| derive_seed(seed, &[hash_str(id.as_str()), 0x706f_6c6c]));
            let (spec, registry) = (spec.clone(), registry.clone());
            let run_dir = opts.run_dir.clone();
            (run_dir, thread::spawn(move || run_workflow(&spec, &registry, &opts)))
        })
        .collect();
    let results: Vec<(PathBuf, Result<RunReport, String>)> = handles
        .into_iter()
        .map(|(d, h)| {
            let r = match h.join() {
                Ok(r) => r.map_err(|e| e.to_string()),
                Err(_) => Err("client thread panicked".to_string()),
            };
            (d, r)
        })
        .collect();
    let wall_seconds = started.elapsed().as_secs_f64();

    let traffic = relay
        .closed_report(&workflow_id)
        .or_else(|| results.iter().find_map(|(_, r)| r.as_ref().ok().and_then(|r| r.traffic.clone())))
        .unwrap_or_default();
    let transcript = if config.record_transcript { relay.take_transcript(&workflow_id) } else { Vec::new() };

    let mut failure = None;
    let clients: Vec<ClientRun> = spec
        .clients
        .iter()
        .zip(results)
        .map(|(id, (run_dir, result))| {
            let t = traffic.get(id).copied().unwrap_or_default();
            let mut run = ClientRun {
                client_id: id.clone(),
                role: spec.role_of(id).expect("member"),
                bytes_sent: t.bytes_out,
                bytes_received: t.bytes_in,
                frames_sent: t.frames_out,
                frames_received: t.frames_in,
                step_seconds: Vec::new(),
                total_seconds: 0.0,
                run_dir,
                error: None,
            };
            match result {
                Ok(report) => {
                    run.step_seconds = report.steps.iter().map(|s| s.seconds).collect();
                    run.total_seconds = report.total_seconds;
                    if let RunStatus::Failed { step, reason } = report.status {
                        run.error = Some(format!("step {step}: {reason}"));
                    }
                }
                Err(e) => run.error = Some(e),
            }
            if let (None, Some(e)) = (&failure, &run.error) {
                failure = Some(format!("{id}: {e}"));
            }
            run
        })
        .collect();
    if let Some(f) = &failure {
        warn!("repetition {index} failed: {f}");
    }
    let mut rep = Repetition {
        index,
        seed,
        workflow_id,
        succeeded: failure.is_none(),
        failure,
        wall_seconds,
        clients,
        traffic,
        evaluation: None,
        transcript,
    };
    rep.evaluation = rep.coordinator_output().and_then(|d| EvaluationReport::load(&d.join(EVALUATION_FILE)).ok());
    Ok(rep)
}
