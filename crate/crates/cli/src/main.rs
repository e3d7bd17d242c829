use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use fedmesh_core::controller::{run_workflow, RunOptions, RunReport, WorkflowSpec};
use fedmesh_core::protocol::{ClientId, Role};
use fedmesh_core::relay::server::{RelayOptions, RelayServer};
use fedmesh_ml::data::read_table;
use fedmesh_testbed::compare::{run_comparison, CompareOptions, ModelKind};
use fedmesh_testbed::partition::{partition_dataset, SplitPlan};
use fedmesh_testbed::sim::{run_simulation, SimConfig};
use serde::Deserialize;

const SUCCESS: u8 = 0;
const WORKFLOW_FAILURE: u8 = 1;
const CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "fedmesh", version, about = "Federated workflows over a star-topology relay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the relay until interrupted.
    Relay {
        /// Address to listen on, e.g. 0.0.0.0:7070.
        #[arg(long)]
        listen: Option<String>,
        /// YAML or JSON file with `listen` and `bandwidth_limit`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Downlink limit per member in bytes per second.
        #[arg(long)]
        bandwidth_limit: Option<u64>,
    },
    /// Run a workflow as one client.
    Run {
        #[arg(long)]
        workflow: PathBuf,
        /// Input directory of the first step.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        role: Role,
        /// host:port of the relay; defaults to the workflow's `relay`.
        #[arg(long)]
        relay: Option<String>,
        /// This client's id; the coordinator's id is taken from the workflow.
        #[arg(long)]
        id: Option<ClientId>,
        /// Where step outputs and the run report go.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        poll_ms: Option<u64>,
        /// Uplink limit in bytes per second.
        #[arg(long)]
        bandwidth_limit: Option<u64>,
    },
    /// Print the run report of a run directory as JSON and as a table.
    Report { run_dir: PathBuf },
    /// Run a local simulation with N in-process clients.
    Sim {
        #[arg(long)]
        config: PathBuf,
        /// Write the report as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a CSV across clients.
    Partition {
        #[arg(long)]
        csv: PathBuf,
        /// Comma-separated fractions summing to 1.
        #[arg(long)]
        plan: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare centralized, federated and individual models.
    Compare {
        #[arg(long)]
        dataset: PathBuf,
        /// linreg, logreg, rf_class or rf_reg.
        #[arg(long)]
        model: ModelKind,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Number of clients with equal shares; ignored when --plan is given.
        #[arg(long, default_value_t = 5)]
        clients: usize,
        #[arg(long)]
        plan: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        label: Option<String>,
        /// Columns to leave out of the features, comma-separated.
        #[arg(long, value_delimiter = ',')]
        ignore: Vec<String>,
        #[arg(long, default_value_t = 100)]
        trees: usize,
        /// Output directory for the tables and all run files.
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn config(message: impl ToString) -> Failure {
    Failure { code: CONFIG_ERROR, message: message.to_string() }
}

fn failed(message: impl ToString) -> Failure {
    Failure { code: WORKFLOW_FAILURE, message: message.to_string() }
}

fn testbed(e: fedmesh_testbed::TestbedError) -> Failure {
    if e.is_config_error() {
        config(e)
    } else {
        failed(e)
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, Failure> {
    addr.to_socket_addrs()
        .map_err(|e| config(format!("relay address {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| config(format!("relay address {addr:?} resolves to nothing")))
}

#[derive(Debug, Default, Deserialize)]
struct RelayFile {
    listen: Option<String>,
    bandwidth_limit: Option<u64>,
}

fn read_relay_file(path: &Path) -> Result<RelayFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
    let parsed = if yaml { serde_yaml::from_str(&text).map_err(|e| e.to_string()) } else { serde_json::from_str(&text).map_err(|e| e.to_string()) };
    parsed.map_err(|e| config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Relay { listen, config: file, bandwidth_limit } => {
            let file = file.as_deref().map(read_relay_file).transpose()?.unwrap_or_default();
            let listen = listen.or(file.listen).unwrap_or_else(|| "127.0.0.1:7070".into());
            let bandwidth_limit = bandwidth_limit.or(file.bandwidth_limit);
            if bandwidth_limit == Some(0) {
                return Err(config("bandwidth limit must be positive"));
            }
            let server = RelayServer::bind(&listen, RelayOptions { bandwidth_limit, record_transcript: false })
                .map_err(|e| config(format!("cannot listen on {listen}: {e}")))?;
            println!("relay listening on {}", server.local_addr());
            loop {
                std::thread::park();
            }
        }
        Command::Run { workflow, data, role, relay, id, run_dir, poll_ms, bandwidth_limit } => {
            let spec = WorkflowSpec::from_file(&workflow).map_err(config)?;
            let client_id = match (id, role) {
                (Some(id), _) => id,
                (None, Role::Coordinator) => spec.coordinator.clone(),
                (None, Role::Participant) => return Err(config("participants need --id")),
            };
            let relay = relay.or_else(|| spec.relay.clone()).ok_or_else(|| config("no relay address: pass --relay or set `relay`"))?;
            let run_dir = run_dir.unwrap_or_else(|| PathBuf::from(format!("run-{client_id}")));
            let mut opts = RunOptions::new(client_id, resolve(&relay)?, data, run_dir);
            opts.role = Some(role);
            opts.poll_interval = poll_ms.map(Duration::from_millis);
            opts.bandwidth_limit = bandwidth_limit;
            let report = run_workflow(&spec, &fedmesh_ml::registry(), &opts).map_err(|e| if e.is_config_error() { config(e) } else { failed(e) })?;
            print!("{}", report.to_table());
            if report.status.is_success() {
                Ok(())
            } else {
                Err(failed("workflow failed"))
            }
        }
        Command::Report { run_dir } => {
            let report = RunReport::load(&run_dir).map_err(|e| config(format!("{}: {e}", run_dir.display())))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Sim { config: path, out } => {
            let sim = SimConfig::from_file(&path).map_err(testbed)?;
            let report = run_simulation(&sim, &fedmesh_ml::registry()).map_err(testbed)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                write(&out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            }
            if report.all_succeeded() {
                Ok(())
            } else {
                Err(failed(format!("{} of {} repetitions failed", report.failures, report.repetitions.len())))
            }
        }
        Command::Partition { csv, plan, seed, out } => {
            let plan = SplitPlan::parse(&plan).map_err(testbed)?;
            for dir in partition_dataset(&csv, &plan, seed, &out).map_err(testbed)? {
                println!("{}", dir.display());
            }
            Ok(())
        }
        Command::Compare { dataset, model, folds, clients, plan, seed, label, ignore, trees, out } => {
            let plan = match plan {
                Some(p) => SplitPlan::parse(&p).map_err(testbed)?,
                None if clients == 0 => return Err(config("--clients must be at least 1")),
                None => SplitPlan::even(clients),
            };
            let table = read_table(&dataset).map_err(config)?;
            let mut opts = CompareOptions::new(model, &out);
            opts.folds = folds;
            opts.seed = seed;
            opts.label_column = label;
            opts.ignore_columns = ignore;
            opts.trees = trees;
            let cmp = run_comparison(&table, &plan, &opts).map_err(testbed)?;
            cmp.write(&out).map_err(testbed)?;
            print!("{}", cmp.summary());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::from(SUCCESS),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
