//! Client-side orchestration: runs the steps of a workflow in order,
//! drives each app through its poll loop and moves app payloads over the
//! relay connection.
//!
//! Steps are separated by a barrier: participants report `step_done`, and
//! the coordinator answers with `step_complete` once every member's app has
//! finished. Data frames carry the step index in the `step` attribute, so a
//! frame for a later step is buffered until that step starts.

mod report;
mod spec;

use std::collections::{BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::app::{require_input, App, AppConfig, SetupContext, SetupInfo, StepLog};
use crate::link::{ConnectOptions, LinkError, RelayClient};
use crate::protocol::{control, ClientId, Frame, FrameKind, Role, ATTR_REASON, ATTR_STEP};
use crate::relay::TrafficReport;

pub use report::{RunReport, RunStatus, StepReport, REPORT_FILE};
pub use spec::{AppRegistry, SpecError, StepSpec, WorkflowSpec};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(3);
pub const DEFAULT_STEP_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("client {0} is not part of the workflow")]
    NotAMember(ClientId),
    #[error("role {given} does not match the workflow, which makes {client} a {expected}")]
    RoleMismatch { client: ClientId, given: Role, expected: Role },
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("session start failed: {0}")]
    Start(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ControllerError {
    /// Problems with the workflow file or command line, as opposed to
    /// failures while running.
    pub fn is_config_error(&self) -> bool {
        matches!(self, ControllerError::Spec(_) | ControllerError::NotAMember(_) | ControllerError::RoleMismatch { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ControllerError + '_ {
    move |source| ControllerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub client_id: ClientId,
    /// Checked against the workflow when given.
    pub role: Option<Role>,
    pub relay: SocketAddr,
    /// Input of the first step.
    pub data_dir: PathBuf,
    /// Receives one directory per step and the run report.
    pub run_dir: PathBuf,
    /// Overrides the workflow's interval, which defaults to 3 s.
    pub poll_interval: Option<Duration>,
    pub step_timeout: Option<Duration>,
    /// Uplink limit of this client in bytes per second.
    pub bandwidth_limit: Option<u64>,
    /// How long to wait for the session to assemble and to close.
    pub join_timeout: Duration,
    /// Seed for drawing each poll interval uniformly from 0.5 to 1.5 times
    /// the nominal one. Without it clients poll on a fixed period.
    pub poll_jitter: Option<u64>,
}

impl RunOptions {
    pub fn new(client_id: ClientId, relay: SocketAddr, data_dir: impl Into<PathBuf>, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            client_id,
            role: None,
            relay,
            data_dir: data_dir.into(),
            run_dir: run_dir.into(),
            poll_interval: None,
            step_timeout: None,
            bandwidth_limit: None,
            join_timeout: Duration::from_secs(60),
            poll_jitter: None,
        }
    }
}

/// Input and output of one step.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub index: usize,
    pub app: String,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub log: StepLog,
}

/// Prepares step `index`: a fresh output directory and a log file next
/// to it.
pub fn step_context(run_dir: &Path, index: usize, app: &str, input_dir: &Path) -> std::io::Result<StepContext> {
    let step_dir = run_dir.join(format!("step_{index}_{app}"));
    if step_dir.exists() {
        std::fs::remove_dir_all(&step_dir)?;
    }
    let output_dir = step_dir.join("output");
    std::fs::create_dir_all(&output_dir)?;
    let log = StepLog::to_file(&step_dir.join("app.log"))?;
    Ok(StepContext { index, app: app.to_string(), input_dir: input_dir.to_path_buf(), output_dir, log })
}

/// Context of the step after `ctx`: its input is `ctx`'s output, which is
/// made read-only first.
pub fn chain_outputs(ctx: &StepContext, run_dir: &Path, next_app: &str) -> std::io::Result<StepContext> {
    set_read_only(&ctx.output_dir)?;
    step_context(run_dir, ctx.index + 1, next_app, &ctx.output_dir)
}

fn set_read_only(dir: &Path) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            set_read_only(&path)?;
        } else {
            let mut perms = std::fs::metadata(&path)?.permissions();
            perms.set_readonly(true);
            std::fs::set_permissions(&path, perms)?;
        }
    }
    Ok(())
}

/// Why a step stopped early.
#[derive(Debug)]
struct StepFailure {
    reason: String,
    /// Whether the other members still need to be told.
    notify: bool,
}

impl StepFailure {
    fn local(reason: impl Into<String>) -> Self {
        Self { reason: reason.into(), notify: true }
    }

    fn remote(reason: impl Into<String>) -> Self {
        Self { reason: reason.into(), notify: false }
    }
}

struct Session {
    link: RelayClient,
    me: ClientId,
    role: Role,
    workflow_id: String,
    /// Every member except this client, in workflow order.
    others: Vec<ClientId>,
    buffered: VecDeque<Frame>,
    traffic: Option<TrafficReport>,
}

impl Session {
    fn control(&self, verb: &str) -> Frame {
        Frame::control(&self.workflow_id, self.me.clone(), verb)
    }

    fn send(&self, frame: &Frame) -> Result<(), StepFailure> {
        self.link.send(frame).map(|_| ()).map_err(|e| StepFailure::remote(format!("relay connection lost: {e}")))
    }

    fn recv(&self, timeout: Duration) -> Result<Option<Frame>, StepFailure> {
        self.link.recv_timeout(timeout).map_err(|e| StepFailure::remote(format!("relay connection lost: {e}")))
    }

    /// Coordinator waits for every participant, then locks the session.
    fn start(&mut self, timeout: Duration) -> Result<(), ControllerError> {
        let deadline = Instant::now() + timeout;
        if self.role.is_coordinator() {
            let mut joined = BTreeSet::new();
            while joined.len() < self.others.len() {
                let frame = self
                    .recv(deadline.saturating_duration_since(Instant::now()))
                    .map_err(|f| ControllerError::Start(f.reason))?
                    .ok_or_else(|| {
                        let missing: Vec<_> = self.others.iter().filter(|c| !joined.contains(*c)).map(|c| c.as_str()).collect();
                        ControllerError::Start(format!("timed out waiting for {}", missing.join(", ")))
                    })?;
                match frame.control_verb() {
                    Some(control::JOINED) => {
                        let who = frame.attr("client").and_then(|c| ClientId::new(c).ok());
                        match who {
                            Some(c) if self.others.contains(&c) => {
                                joined.insert(c);
                            }
                            other => return Err(ControllerError::Start(format!("unexpected client {other:?} joined"))),
                        }
                    }
                    Some(control::FAILED) => {
                        return Err(ControllerError::Start(format!(
                            "{} dropped out before the start",
                            frame.attr("client").unwrap_or("a participant")
                        )))
                    }
                    _ => self.buffered.push_back(frame),
                }
            }
            self.send(&self.control(control::START)).map_err(|f| ControllerError::Start(f.reason))?;
        } else {
            loop {
                let frame = self
                    .recv(deadline.saturating_duration_since(Instant::now()))
                    .map_err(|f| ControllerError::Start(f.reason))?
                    .ok_or_else(|| ControllerError::Start("timed out waiting for the coordinator to start".into()))?;
                match frame.control_verb() {
                    Some(control::START) => break,
                    Some(control::ABORT) | Some(control::FAILED) => {
                        return Err(ControllerError::Start(format!(
                            "session aborted before the start: {}",
                            frame.attr(ATTR_REASON).or(frame.attr("client")).unwrap_or("unknown reason")
                        )))
                    }
                    _ => self.buffered.push_back(frame),
                }
            }
        }
        Ok(())
    }

    fn data_frame(&self, step: usize, destination: Option<ClientId>, payload: Vec<u8>) -> Frame {
        let kind = if self.role.is_coordinator() { FrameKind::Broadcast } else { FrameKind::ToCoordinator };
        let mut frame = Frame::new(&self.workflow_id, self.me.clone(), kind, payload).with_attr(ATTR_STEP, step.to_string());
        if let Some(d) = destination {
            frame = frame.with_recipient(d);
        }
        frame.with_declared_size()
    }

    /// Routes one outgoing payload according to role and destination.
    fn dispatch(&self, app: &mut dyn App, step: usize, destination: Option<ClientId>, payload: Vec<u8>) -> Result<(), StepFailure> {
        if !self.role.is_coordinator() {
            return self.send(&self.data_frame(step, None, payload));
        }
        match destination {
            Some(d) if d == self.me => app
                .deliver_incoming(payload, Some(d))
                .map_err(|e| StepFailure::local(format!("app failed on its own data: {e}"))),
            Some(d) if self.others.contains(&d) => self.send(&self.data_frame(step, Some(d), payload)),
            Some(d) => Err(StepFailure::local(format!("app addressed unknown client {d}"))),
            None if self.others.is_empty() => Ok(()),
            None => self.send(&self.data_frame(step, None, payload)),
        }
    }

    fn drive_step(&mut self, app: &mut dyn App, ctx: &StepContext, info: SetupInfo, config: AppConfig, poll: &mut Poll, timeout: Duration) -> Result<(), StepFailure> {
        let step = ctx.index;
        require_input(&ctx.input_dir).map_err(|e| StepFailure::local(e.to_string()))?;
        app.setup(SetupContext {
            info,
            input_dir: ctx.input_dir.clone(),
            output_dir: ctx.output_dir.clone(),
            config,
            log: ctx.log.clone(),
        })
        .map_err(|e| StepFailure::local(e.to_string()))?;

        let mut state = StepState { done_from: BTreeSet::new(), complete: false };
        let pending: Vec<Frame> = std::mem::take(&mut self.buffered).into_iter().collect();
        for frame in pending {
            self.handle_frame(app, step, frame, &mut state)?;
        }

        let deadline = Instant::now() + timeout;
        let mut next_tick = Instant::now();
        let mut local_done = false;
        let mut sent_done = false;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(StepFailure::local(format!("step {step} timed out after {timeout:?}")));
            }
            if now >= next_tick {
                next_tick = now + poll.next();
                loop {
                    let status = app.status();
                    if !status.available {
                        local_done = status.finished;
                        break;
                    }
                    let payload = app.fetch_outgoing().map_err(|e| StepFailure::local(e.to_string()))?;
                    if let Some(size) = status.size {
                        if size != payload.len() as u64 {
                            return Err(StepFailure::local(format!("app announced {size} bytes but returned {}", payload.len())));
                        }
                    }
                    self.dispatch(app, step, status.destination, payload)?;
                }
                if local_done && !self.role.is_coordinator() && !sent_done {
                    self.send(&self.control(control::STEP_DONE).with_attr(ATTR_STEP, step.to_string()))?;
                    sent_done = true;
                }
            }
            if local_done {
                if self.role.is_coordinator() && state.done_from.len() == self.others.len() {
                    if !self.others.is_empty() {
                        self.send(&self.control(control::STEP_COMPLETE).with_attr(ATTR_STEP, step.to_string()))?;
                    }
                    return Ok(());
                }
                if !self.role.is_coordinator() && state.complete {
                    return Ok(());
                }
            }
            let wait = next_tick.min(deadline).saturating_duration_since(Instant::now());
            if let Some(frame) = self.recv(wait)? {
                self.handle_frame(app, step, frame, &mut state)?;
                // Frames behind the barrier belong to the next step.
                while !state.complete {
                    let Some(frame) = self.recv(Duration::ZERO)? else { break };
                    self.handle_frame(app, step, frame, &mut state)?;
                }
            }
        }
    }

    fn handle_frame(&mut self, app: &mut dyn App, step: usize, frame: Frame, state: &mut StepState) -> Result<(), StepFailure> {
        let frame_step = frame.attr(ATTR_STEP).and_then(|s| s.parse::<usize>().ok());
        match frame.control_verb() {
            Some(control::STEP_DONE) if self.role.is_coordinator() => {
                if frame_step != Some(step) {
                    return Err(StepFailure::local(format!("{} reported step {frame_step:?} during step {step}", frame.sender)));
                }
                state.done_from.insert(frame.sender);
                Ok(())
            }
            Some(control::STEP_COMPLETE) if !self.role.is_coordinator() => {
                if frame_step != Some(step) {
                    return Err(StepFailure::local(format!("coordinator completed step {frame_step:?} during step {step}")));
                }
                state.complete = true;
                Ok(())
            }
            Some(control::ABORT) => Err(StepFailure::remote(format!(
                "{} aborted the workflow: {}",
                frame.sender,
                frame.attr(ATTR_REASON).unwrap_or("no reason given")
            ))),
            Some(control::FAILED) => Err(StepFailure::remote(format!(
                "{} lost its relay connection",
                frame.attr("client").unwrap_or("a member")
            ))),
            Some(control::REJECTED) => Err(StepFailure::local(format!(
                "relay rejected a frame: {}",
                frame.attr(ATTR_REASON).unwrap_or("no reason given")
            ))),
            Some(control::CLOSED) => Err(StepFailure::remote("workflow closed by the coordinator")),
            Some(other) => {
                warn!("{}: ignoring control frame {other:?} from {}", self.me, frame.sender);
                Ok(())
            }
            None => match frame_step {
                Some(s) if s == step => {
                    let from = if self.role.is_coordinator() { Some(frame.sender) } else { None };
                    app.deliver_incoming(frame.payload, from).map_err(|e| StepFailure::local(e.to_string()))
                }
                Some(s) if s > step => {
                    self.buffered.push_back(frame);
                    Ok(())
                }
                other => Err(StepFailure::local(format!(
                    "data frame for step {other:?} from {} arrived during step {step}",
                    frame.sender
                ))),
            },
        }
    }

    /// Coordinator asks the relay to close; everyone waits for the report.
    fn close(&mut self, timeout: Duration) {
        if self.role.is_coordinator() {
            if let Err(e) = self.send(&self.control(control::CLOSE)) {
                warn!("{}: could not close the workflow: {}", self.me, e.reason);
                return;
            }
        }
        let deadline = Instant::now() + timeout;
        loop {
            match self.recv(deadline.saturating_duration_since(Instant::now())) {
                Ok(Some(frame)) if frame.control_verb() == Some(control::CLOSED) => {
                    match serde_json::from_slice(&frame.payload) {
                        Ok(report) => self.traffic = Some(report),
                        Err(e) => warn!("{}: unreadable traffic report: {e}", self.me),
                    }
                    return;
                }
                Ok(Some(_)) => {}
                Ok(None) | Err(_) => {
                    warn!("{}: no traffic report received", self.me);
                    return;
                }
            }
        }
    }
}

/// Poll period, optionally jittered.
struct Poll {
    period: Duration,
    jitter: Option<ChaCha8Rng>,
}

impl Poll {
    fn next(&mut self) -> Duration {
        match &mut self.jitter {
            None => self.period,
            Some(rng) => {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                self.period.mul_f64(0.5 + u)
            }
        }
    }
}

struct StepState {
    done_from: BTreeSet<ClientId>,
    complete: bool,
}

/// Runs a whole workflow as one client and writes the run report into
/// `options.run_dir`.
///
/// Errors are returned for problems that prevent the run from starting;
/// a step failure yields a report with a failed status.
pub fn run_workflow(spec: &WorkflowSpec, registry: &AppRegistry, options: &RunOptions) -> Result<RunReport, ControllerError> {
    spec.validate(registry)?;
    let me = options.client_id.clone();
    let role = spec.role_of(&me).ok_or_else(|| ControllerError::NotAMember(me.clone()))?;
    if let Some(given) = options.role {
        if given != role {
            return Err(ControllerError::RoleMismatch { client: me, given, expected: role });
        }
    }
    let period = options
        .poll_interval
        .or(spec.poll_interval_ms.map(Duration::from_millis))
        .unwrap_or(DEFAULT_POLL_INTERVAL);
    let mut poll = Poll { period, jitter: options.poll_jitter.map(ChaCha8Rng::seed_from_u64) };
    let step_timeout = options
        .step_timeout
        .or(spec.step_timeout_secs.map(Duration::from_secs))
        .unwrap_or(DEFAULT_STEP_TIMEOUT);

    let run_dir = &options.run_dir;
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    clear_previous_run(run_dir).map_err(io_err(run_dir))?;

    let started = Instant::now();
    let link = RelayClient::connect(
        options.relay,
        ConnectOptions {
            workflow_id: spec.workflow_id.clone(),
            credentials: spec.credentials.clone(),
            client_id: me.clone(),
            role,
            bandwidth_limit: options.bandwidth_limit,
            register_timeout: options.join_timeout,
        },
    )?;
    let mut session = Session {
        link,
        me: me.clone(),
        role,
        workflow_id: spec.workflow_id.clone(),
        others: spec.clients.iter().filter(|c| **c != me).cloned().collect(),
        buffered: VecDeque::new(),
        traffic: None,
    };
    session.start(options.join_timeout)?;
    info!("{me}: workflow {} started as {role}", spec.workflow_id);

    let info = SetupInfo { id: me.clone(), master: role.is_coordinator(), clients: spec.clients.clone() };
    let mut steps = Vec::new();
    let mut status = RunStatus::Success;
    let mut ctx: Option<StepContext> = None;
    for (index, step) in spec.steps.iter().enumerate() {
        let prepared = match &ctx {
            None => step_context(run_dir, index, &step.app, &options.data_dir),
            Some(prev) => chain_outputs(prev, run_dir, &step.app),
        };
        let current = prepared.map_err(io_err(run_dir))?;
        let mut config = step.config.clone();
        config.set_default("seed", spec.seed);
        let step_start = Instant::now();
        let outcome = registry
            .create(&step.app, &config)
            .map_err(|e| StepFailure::local(e.to_string()))
            .and_then(|mut app| session.drive_step(app.as_mut(), &current, info.clone(), config, &mut poll, step_timeout));
        let seconds = step_start.elapsed().as_secs_f64();
        let succeeded = outcome.is_ok();
        steps.push(StepReport { index, app: step.app.clone(), seconds, output_dir: current.output_dir.clone(), succeeded });
        if let Err(failure) = outcome {
            current.log.error(&failure.reason);
            warn!("{me}: step {index} ({}) failed: {}", step.app, failure.reason);
            if failure.notify {
                let abort = session.control(control::ABORT).with_attr(ATTR_REASON, failure.reason.clone());
                let _ = session.send(&abort);
            }
            status = RunStatus::Failed { step: index, reason: failure.reason };
            break;
        }
        info!("{me}: step {index} ({}) finished in {seconds:.3} s", step.app);
        ctx = Some(current);
    }
    if status.is_success() {
        session.close(options.join_timeout);
    }
    let report = RunReport {
        workflow_id: spec.workflow_id.clone(),
        client_id: me,
        role,
        status,
        steps,
        total_seconds: started.elapsed().as_secs_f64(),
        traffic: session.traffic.take(),
    };
    report.save(run_dir).map_err(io_err(run_dir))?;
    Ok(report)
}

fn clear_previous_run(run_dir: &Path) -> std::io::Result<()> {
    for entry in std::fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if entry.file_type()?.is_dir() && name.starts_with("step_") {
            std::fs::remove_dir_all(entry.path())?;
        } else if name == REPORT_FILE {
            std::fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}
