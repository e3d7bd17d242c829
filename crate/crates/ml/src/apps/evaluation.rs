//! Payloads are JSON. Local: `{"splits": [LocalEvaluation, ...]}` holding
//! confusion counts or residual summaries; global: an [`EvaluationReport`].
//! Residual summaries carry the sorted absolute residuals so the pooled
//! median is exact; they are derived values, never features or labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedmesh_core::app::{AppResult, Local, RoundAlgorithm, SetupContext};
use fedmesh_core::ClientId;
use serde::{Deserialize, Serialize};

use super::write_json;
use crate::data::{read_predictions, PRED_FILE};
use crate::error::{MlError, MlResult};
use crate::evaluation::{aggregate_evaluation, local_metrics, ConfusionCounts, LocalEvaluation, Metrics, ResidualSummary};
use crate::forest::Task;

pub const EVALUATION_FILE: &str = "evaluation.json";
pub const LOCAL_EVALUATION_FILE: &str = "local_evaluation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub metrics: Metrics,
}

/// Aggregated report, identical on every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: Task,
    pub splits: Vec<SplitMetrics>,
    /// Unweighted mean of each metric over splits.
    pub mean: BTreeMap<String, f64>,
}

impl EvaluationReport {
    pub fn load(path: &Path) -> MlResult<Self> {
        let raw = std::fs::read(path).map_err(|e| MlError::file(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| MlError::file(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LocalPayload {
    splits: Vec<LocalEvaluation>,
}

/// Evaluates `pred.csv` files (per split, or one at the top level).
pub struct EvaluationApp {
    task: Task,
    names: Vec<String>,
    locals: Vec<LocalEvaluation>,
    report: Option<(Vec<u8>, EvaluationReport)>,
}

impl EvaluationApp {
    pub fn new(task: Task) -> Self {
        Self { task, names: Vec::new(), locals: Vec::new(), report: None }
    }
}

fn prediction_files(dir: &Path) -> MlResult<Vec<(String, PathBuf)>> {
    let top = dir.join(PRED_FILE);
    if top.exists() {
        return Ok(vec![(String::new(), top)]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| MlError::file(dir, e))? {
        let entry = entry.map_err(|e| MlError::file(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(idx) = name.strip_prefix("split_").and_then(|s| s.parse::<usize>().ok()) {
            let p = entry.path().join(PRED_FILE);
            if p.exists() {
                out.push((idx, name, p));
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(MlError::file(dir, "no input: no prediction files found"));
    }
    Ok(out.into_iter().map(|(_, n, p)| (n, p)).collect())
}

fn mean_metrics(all: &[Metrics]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for m in all {
        if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(m) {
            for (k, v) in map {
                if let Some(x) = v.as_f64() {
                    *sums.entry(k).or_default() += x;
                }
            }
        }
    }
    sums.values_mut().for_each(|v| *v /= all.len() as f64);
    sums
}

impl RoundAlgorithm for EvaluationApp {
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        for (name, path) in prediction_files(&ctx.input_dir)? {
            let (y, p) = read_predictions(&path)?;
            let local = match self.task {
                Task::Classification => LocalEvaluation::Classification { counts: ConfusionCounts::from_predictions(&y, &p)? },
                Task::Regression => LocalEvaluation::Regression { summary: ResidualSummary::from_predictions(&y, &p)? },
            };
            self.names.push(name);
            self.locals.push(local);
        }
        Ok(())
    }

    fn local(&mut self, global: Option<&[u8]>) -> AppResult<Local> {
        match global {
            None => {
                let body = serde_json::to_vec(&LocalPayload { splits: self.locals.clone() }).map_err(MlError::invalid_from)?;
                Ok(Local::Send(body))
            }
            Some(g) => {
                let report: EvaluationReport = serde_json::from_slice(g).map_err(MlError::invalid_from)?;
                self.report = Some((g.to_vec(), report));
                Ok(Local::Done)
            }
        }
    }

    fn aggregate(&mut self, locals: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
        let mut per_split: Vec<Vec<LocalEvaluation>> = vec![Vec::new(); self.names.len()];
        for (client, bytes) in &locals {
            let payload: LocalPayload = serde_json::from_slice(bytes).map_err(|e| MlError::invalid(format!("{client}: {e}")))?;
            if payload.splits.len() != self.names.len() {
                return Err(MlError::invalid(format!("{client} evaluated {} splits, expected {}", payload.splits.len(), self.names.len())).into());
            }
            for (slot, l) in per_split.iter_mut().zip(payload.splits) {
                slot.push(l);
            }
        }
        let mut splits = Vec::new();
        for (name, locals) in self.names.iter().zip(&per_split) {
            splits.push(SplitMetrics { split: name.clone(), metrics: aggregate_evaluation(locals)? });
        }
        let all: Vec<Metrics> = splits.iter().map(|s| s.metrics.clone()).collect();
        let report = EvaluationReport { task: self.task, splits, mean: mean_metrics(&all) };
        Ok(serde_json::to_vec_pretty(&report).map_err(MlError::invalid_from)?)
    }

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()> {
        let (bytes, _) = self.report.as_ref().expect("report received");
        std::fs::write(output_dir.join(EVALUATION_FILE), bytes).map_err(|e| fedmesh_core::app::AppError::io(output_dir, e))?;
        let local: Vec<SplitMetrics> = self
            .names
            .iter()
            .zip(&self.locals)
            .map(|(n, l)| Ok(SplitMetrics { split: n.clone(), metrics: local_metrics(l)? }))
            .collect::<MlResult<_>>()?;
        write_json(&output_dir.join(LOCAL_EVALUATION_FILE), &local)
    }
}
