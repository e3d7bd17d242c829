//! The app-side contract: four calls driven by the controller.
//!
//! An app never initiates network activity. The controller calls
//! [`App::setup`] once, then polls [`App::status`], pulls outgoing data with
//! [`App::fetch_outgoing`] and pushes relay traffic in with
//! [`App::deliver_incoming`].

pub mod http;
mod round;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::protocol::ClientId;

pub use round::{Local, RoundAlgorithm, RoundApp};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("app failure: {0}")]
    Failure(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn failure(msg: impl std::fmt::Display) -> Self {
        AppError::Failure(msg.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;

/// Body of `POST /setup`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetupInfo {
    pub id: ClientId,
    pub master: bool,
    pub clients: Vec<ClientId>,
}

impl SetupInfo {
    pub fn validate(&self) -> AppResult<()> {
        if !self.clients.contains(&self.id) {
            return Err(AppError::Setup(format!("own id {} missing from client list", self.id)));
        }
        Ok(())
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Body of `GET /status`.
///
/// `destination` is an addition to the three documented fields: when set on
/// a coordinator it narrows the next payload to one client, and naming the
/// coordinator itself requests loopback delivery without relay transit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub available: bool,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<ClientId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppStage {
    AwaitingSetup,
    LocalCompute,
    AwaitingGlobal,
    Finished,
}

impl AppStage {
    pub fn can_advance_to(self, next: AppStage) -> bool {
        use AppStage::*;
        matches!(
            (self, next),
            (AwaitingSetup, LocalCompute) | (LocalCompute, AwaitingGlobal) | (AwaitingGlobal, LocalCompute) | (LocalCompute, Finished)
        )
    }
}

/// Enforces the legal stage order
/// `AwaitingSetup -> LocalCompute -> (AwaitingGlobal -> LocalCompute)* -> Finished`.
#[derive(Debug, Clone)]
pub struct StageMachine {
    stage: AppStage,
}

impl Default for StageMachine {
    fn default() -> Self {
        Self { stage: AppStage::AwaitingSetup }
    }
}

impl StageMachine {
    pub fn stage(&self) -> AppStage {
        self.stage
    }

    pub fn advance(&mut self, next: AppStage) -> AppResult<()> {
        if !self.stage.can_advance_to(next) {
            return Err(AppError::Contract(format!("illegal stage transition {:?} -> {:?}", self.stage, next)));
        }
        self.stage = next;
        Ok(())
    }

    pub fn expect(&self, stage: AppStage, call: &str) -> AppResult<()> {
        if self.stage != stage {
            return Err(AppError::Contract(format!("{call} called in stage {:?}", self.stage)));
        }
        Ok(())
    }
}

/// Per-step configuration, a JSON object.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppConfig(pub Map<String, Value>);

impl AppConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_value(value: Value) -> AppResult<Self> {
        match value {
            Value::Object(map) => Ok(Self(map)),
            Value::Null => Ok(Self::default()),
            other => Err(AppError::Setup(format!("app config must be an object, got {other}"))),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn set_default(&mut self, key: &str, value: impl Into<Value>) {
        self.0.entry(key.to_string()).or_insert_with(|| value.into());
    }

    pub fn u64_or(&self, key: &str, default: u64) -> AppResult<u64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| AppError::Setup(format!("config key {key} must be a non-negative integer"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> AppResult<usize> {
        self.u64_or(key, default as u64).map(|v| v as usize)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> AppResult<f64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| AppError::Setup(format!("config key {key} must be a number"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> AppResult<bool> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or_else(|| AppError::Setup(format!("config key {key} must be a boolean"))),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> AppResult<&'a str> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_str().ok_or_else(|| AppError::Setup(format!("config key {key} must be a string"))),
        }
    }

    pub fn opt_str(&self, key: &str) -> AppResult<Option<&str>> {
        match self.0.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v.as_str().map(Some).ok_or_else(|| AppError::Setup(format!("config key {key} must be a string"))),
        }
    }

    pub fn str_list(&self, key: &str) -> AppResult<Vec<String>> {
        match self.0.get(key) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| AppError::Setup(format!("config key {key} must list strings"))))
                .collect(),
            Some(_) => Err(AppError::Setup(format!("config key {key} must be a list of strings"))),
        }
    }
}

/// Append-only step log, mirrored to a file when one is attached.
#[derive(Debug, Clone, Default)]
pub struct StepLog {
    inner: Arc<Mutex<LogInner>>,
}

#[derive(Debug, Default)]
struct LogInner {
    lines: Vec<String>,
    file: Option<File>,
}

impl StepLog {
    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner: Arc::new(Mutex::new(LogInner { lines: Vec::new(), file: Some(file) })) })
    }

    fn push(&self, level: &str, msg: &str) {
        let line = format!("[{level}] {msg}");
        let mut inner = self.inner.lock().unwrap();
        if let Some(f) = &mut inner.file {
            let _ = writeln!(f, "{line}");
        }
        inner.lines.push(line);
    }

    pub fn info(&self, msg: impl AsRef<str>) {
        log::info!("{}", msg.as_ref());
        self.push("info", msg.as_ref());
    }

    pub fn warn(&self, msg: impl AsRef<str>) {
        log::warn!("{}", msg.as_ref());
        self.push("warn", msg.as_ref());
    }

    pub fn error(&self, msg: impl AsRef<str>) {
        log::error!("{}", msg.as_ref());
        self.push("error", msg.as_ref());
    }

    pub fn lines(&self) -> Vec<String> {
        self.inner.lock().unwrap().lines.clone()
    }
}

/// Everything an app receives with `setup`.
#[derive(Debug, Clone)]
pub struct SetupContext {
    pub info: SetupInfo,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub config: AppConfig,
    pub log: StepLog,
}

pub trait App: Send {
    fn setup(&mut self, ctx: SetupContext) -> AppResult<()>;

    /// Pure observation of the app state.
    fn status(&self) -> StatusReport;

    /// Returns the payload advertised by the last status report.
    fn fetch_outgoing(&mut self) -> AppResult<Vec<u8>>;

    /// Coordinators receive participant packets with `from` set; participants
    /// receive coordinator broadcasts with `from` absent.
    fn deliver_incoming(&mut self, data: Vec<u8>, from: Option<ClientId>) -> AppResult<()>;
}

impl<T: App + ?Sized> App for Box<T> {
    fn setup(&mut self, ctx: SetupContext) -> AppResult<()> {
        (**self).setup(ctx)
    }

    fn status(&self) -> StatusReport {
        (**self).status()
    }

    fn fetch_outgoing(&mut self) -> AppResult<Vec<u8>> {
        (**self).fetch_outgoing()
    }

    fn deliver_incoming(&mut self, data: Vec<u8>, from: Option<ClientId>) -> AppResult<()> {
        (**self).deliver_incoming(data, from)
    }
}

/// Checks that a directory exists and holds at least one entry.
pub fn require_input(dir: &Path) -> AppResult<()> {
    let mut entries = std::fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?;
    if entries.next().is_none() {
        return Err(AppError::Setup(format!("no input in {}", dir.display())));
    }
    Ok(())
}
