//! Linear and logistic regression as additive models.
//!
//! Local statistics are one vector per round, the concatenation over
//! splits of `XtX row-major | Xty | n` (linear) or `g | H row-major | n`
//! (logistic, active splits only). Globals:
//!
//! ```text
//! linear:   "LINB" | split count u32 | dim u32 | per split: dim x f64
//! logistic: "LOGB" | round u32 | split count u32 | dim u32 | per split: state u8 | dim x f64
//! ```
//!
//! with state 0 active, 1 converged, 2 stopped at the iteration cap.

use std::path::Path;

use fedmesh_core::app::{AppResult, SetupContext, StepLog};
use fedmesh_core::smpc::AdditiveModel;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{cfg, ensure_dir, load_splits, write_json, SplitData};
use crate::data::{split_output, write_predictions, ColumnSpec, SplitFiles, PRED_FILE};
use crate::error::{MlError, MlResult};
use crate::linalg::solve_spd;
use crate::linreg::{local_linreg_stats, LinregStats};
use crate::logreg::{local_logreg_step, newton_update, predict_proba, GradientHessian, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::wire::{Reader, Writer};

pub const MODEL_FILE: &str = "model.json";

/// Contents of `model.json`, identical on every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: String,
    pub features: Vec<String>,
    pub splits: Vec<SplitModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub split: String,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

impl ModelFile {
    pub fn load(path: &Path) -> MlResult<Self> {
        let raw = std::fs::read(path).map_err(|e| MlError::file(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| MlError::file(path, e))
    }
}

/// Data and settings shared by both regressions.
#[derive(Debug, Default)]
struct Fit {
    splits: Vec<SplitData>,
    intercept: bool,
    names: Vec<String>,
}

impl Fit {
    fn load(ctx: &SetupContext) -> MlResult<Self> {
        let columns = ColumnSpec::from_config(&ctx.config)?;
        let intercept = cfg(ctx.config.bool_or("intercept", true))?;
        let splits = load_splits(&ctx.input_dir, &columns)?;
        let mut names = Vec::new();
        if intercept {
            names.push("(intercept)".to_string());
        }
        names.extend(splits[0].train.feature_names.iter().cloned());
        Ok(Self { splits, intercept, names })
    }

    fn dim(&self) -> usize {
        self.names.len()
    }

    fn design(&self, s: usize) -> DMatrix<f64> {
        self.splits[s].train.design(self.intercept)
    }

    fn write_predictions(&self, output_dir: &Path, betas: &[DVector<f64>], classify: bool) -> AppResult<()> {
        for (s, beta) in self.splits.iter().zip(betas) {
            let Some(test) = &s.test else { continue };
            let x = test.design(self.intercept);
            let dir = split_output(output_dir, &SplitFiles { name: s.name.clone(), train: Default::default(), test: None });
            ensure_dir(&dir)?;
            let pred: Vec<f64> = if classify {
                predict_proba(&x, beta).into_iter().map(|p| if p >= 0.5 { 1.0 } else { 0.0 }).collect()
            } else {
                (&x * beta).iter().copied().collect()
            };
            write_predictions(&dir.join(PRED_FILE), test.y.as_slice(), &pred)?;
        }
        Ok(())
    }

    fn model_file(&self, model: &str, betas: &[DVector<f64>]) -> ModelFile {
        ModelFile {
            model: model.into(),
            features: self.names.clone(),
            splits: self
                .splits
                .iter()
                .zip(betas)
                .map(|(s, b)| SplitModel { split: s.name.clone(), beta: b.iter().copied().collect(), iterations: None, converged: None })
                .collect(),
        }
    }
}

/// Ordinary least squares from summed `XtX` and `Xty`.
#[derive(Debug, Default)]
pub struct LinregModel {
    fit: Fit,
    betas: Vec<DVector<f64>>,
}

impl LinregModel {
    pub fn betas(&self) -> &[DVector<f64>] {
        &self.betas
    }
}

impl AdditiveModel for LinregModel {
    fn tag(&self) -> [u8; 4] {
        *b"LINR"
    }

    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        self.fit = Fit::load(ctx)?;
        Ok(())
    }

    fn local_stats(&mut self, global: Option<&[u8]>) -> AppResult<Option<Vec<f64>>> {
        let Some(global) = global else {
            let mut out = Vec::new();
            for (s, split) in self.fit.splits.iter().enumerate() {
                out.extend(local_linreg_stats(&self.fit.design(s), &split.train.y)?.to_vec());
            }
            return Ok(Some(out));
        };
        let mut r = Reader::new(global, b"LINB")?;
        let (count, d) = (r.u32()?, r.u32()?);
        if count != self.fit.splits.len() || d != self.fit.dim() {
            return Err(MlError::invalid(format!("global model has {count} splits of dimension {d}")).into());
        }
        self.betas = (0..count).map(|_| r.f64s(d).map(DVector::from_vec)).collect::<MlResult<_>>()?;
        r.finish()?;
        Ok(None)
    }

    fn combine(&mut self, sum: Vec<f64>) -> AppResult<Vec<u8>> {
        let d = self.fit.dim();
        let len = LinregStats::len_for(d);
        if sum.len() != len * self.fit.splits.len() {
            return Err(MlError::invalid(format!("summed statistics of length {}", sum.len())).into());
        }
        let mut w = Writer::new(b"LINB");
        w.u32(self.fit.splits.len()).u32(d);
        for chunk in sum.chunks_exact(len) {
            let stats = LinregStats::from_slice(d, chunk)?;
            let beta = solve_spd(&stats.xtx, &stats.xty, &self.fit.names)?;
            w.f64s(beta.as_slice());
        }
        Ok(w.finish())
    }

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()> {
        self.fit.write_predictions(output_dir, &self.betas, false)?;
        write_json(&output_dir.join(MODEL_FILE), &self.fit.model_file("linear_regression", &self.betas))
    }
}

const ACTIVE: u8 = 0;
const CONVERGED: u8 = 1;
const CAPPED: u8 = 2;

/// Newton-Raphson logistic regression (config `tol`, `max_iter`).
#[derive(Debug, Default)]
pub struct LogregModel {
    fit: Fit,
    tol: f64,
    max_iter: usize,
    round: usize,
    betas: Vec<DVector<f64>>,
    states: Vec<u8>,
    iterations: Vec<usize>,
    log: StepLog,
}

impl LogregModel {
    pub fn betas(&self) -> &[DVector<f64>] {
        &self.betas
    }

    fn encode_global(&self) -> Vec<u8> {
        let mut w = Writer::new(b"LOGB");
        w.u32(self.round).u32(self.betas.len()).u32(self.fit.dim());
        for (b, s) in self.betas.iter().zip(&self.states) {
            w.u8(*s).f64s(b.as_slice());
        }
        w.finish()
    }

    fn decode_global(&mut self, bytes: &[u8]) -> MlResult<()> {
        let mut r = Reader::new(bytes, b"LOGB")?;
        let (round, count, d) = (r.u32()?, r.u32()?, r.u32()?);
        if count != self.fit.splits.len() || d != self.fit.dim() {
            return Err(MlError::invalid(format!("global model has {count} splits of dimension {d}")));
        }
        for s in 0..count {
            let state = r.u8()?;
            if self.states[s] == ACTIVE && state != ACTIVE {
                self.iterations[s] = round;
            }
            self.states[s] = state;
            self.betas[s] = DVector::from_vec(r.f64s(d)?);
        }
        r.finish()?;
        self.round = round;
        Ok(())
    }
}

impl AdditiveModel for LogregModel {
    fn tag(&self) -> [u8; 4] {
        *b"LOGR"
    }

    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        self.fit = Fit::load(ctx)?;
        self.tol = cfg(ctx.config.f64_or("tol", DEFAULT_TOL))?;
        self.max_iter = cfg(ctx.config.usize_or("max_iter", DEFAULT_MAX_ITER))?;
        if self.max_iter == 0 || self.tol <= 0.0 {
            return Err(MlError::invalid("max_iter and tol must be positive").into());
        }
        for s in &self.fit.splits {
            s.train.class_labels()?;
            if s.train.y.iter().any(|&v| v > 1.0) {
                return Err(MlError::invalid("logistic regression needs labels in {0, 1}").into());
            }
        }
        self.betas = vec![DVector::zeros(self.fit.dim()); self.fit.splits.len()];
        self.states = vec![ACTIVE; self.fit.splits.len()];
        self.iterations = vec![0; self.fit.splits.len()];
        self.log = ctx.log.clone();
        Ok(())
    }

    fn local_stats(&mut self, global: Option<&[u8]>) -> AppResult<Option<Vec<f64>>> {
        if let Some(g) = global {
            self.decode_global(g)?;
        }
        if self.states.iter().all(|&s| s != ACTIVE) {
            return Ok(None);
        }
        let mut out = Vec::new();
        for s in 0..self.fit.splits.len() {
            if self.states[s] == ACTIVE {
                let step = local_logreg_step(&self.fit.design(s), &self.fit.splits[s].train.y, &self.betas[s])?;
                out.extend(step.to_vec());
            }
        }
        Ok(Some(out))
    }

    fn combine(&mut self, sum: Vec<f64>) -> AppResult<Vec<u8>> {
        let d = self.fit.dim();
        let len = GradientHessian::len_for(d);
        let active: Vec<usize> = (0..self.states.len()).filter(|&s| self.states[s] == ACTIVE).collect();
        if sum.len() != len * active.len() {
            return Err(MlError::invalid(format!("summed statistics of length {}", sum.len())).into());
        }
        self.round += 1;
        for (&s, chunk) in active.iter().zip(sum.chunks_exact(len)) {
            let total = GradientHessian::from_slice(d, chunk)?;
            let (next, converged) = newton_update(&self.betas[s], &total, self.tol, &self.fit.names).map_err(|e| {
                let split = &self.fit.splits[s].name;
                MlError::Singular(format!("{}round {}: {e}", if split.is_empty() { String::new() } else { format!("{split}, ") }, self.round))
            })?;
            self.betas[s] = next;
            if converged || self.round >= self.max_iter {
                self.iterations[s] = self.round;
            }
            if converged {
                self.states[s] = CONVERGED;
            } else if self.round >= self.max_iter {
                self.states[s] = CAPPED;
                self.log.warn(format!("split {s} stopped at the iteration cap {}", self.max_iter));
            }
        }
        Ok(self.encode_global())
    }

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()> {
        self.fit.write_predictions(output_dir, &self.betas, true)?;
        let mut file = self.fit.model_file("logistic_regression", &self.betas);
        for ((m, s), it) in file.splits.iter_mut().zip(&self.states).zip(&self.iterations) {
            m.iterations = Some(*it);
            m.converged = Some(*s == CONVERGED);
        }
        write_json(&output_dir.join(MODEL_FILE), &file)
    }
}
