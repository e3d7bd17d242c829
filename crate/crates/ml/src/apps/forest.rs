//! Random forest in three exchanges.
//!
//! 1. census: every client reports its training size per split; the
//!    coordinator answers with each client's tree allotment.
//! 2. trees: clients train their allotment; the coordinator merges them in
//!    client order and broadcasts the merged forests.
//! 3. eval: clients score the merged forests on their test rows; the pooled
//!    score is broadcast for reporting.
//!
//! Every payload is `"RFST" | phase u8 | split count u32 | body`:
//!
//! | phase | local                            | global                                        |
//! |-------|----------------------------------|-----------------------------------------------|
//! | 1     | per split: n u64, classes u32    | clients u32, per split: classes u32, per client trees u32 |
//! | 2     | per split: forest                | per split: merged forest                      |
//! | 3     | per split: score f64, count f64  | per split: summed score f64, count f64        |
//!
//! Forests use the encoding in [`crate::forest`]. Scores are correct
//! predictions (classification) or squared error (regression).

use std::path::Path;

use fedmesh_core::app::{AppResult, Local, RoundAlgorithm, SetupContext};
use fedmesh_core::ClientId;
use serde::Serialize;

use super::{cfg, ensure_dir, load_splits, seed_of, write_json, SplitData};
use crate::data::{split_output, write_predictions, ColumnSpec, SplitFiles, PRED_FILE};
use crate::error::{MlError, MlResult};
use crate::forest::{apportion, merge_forests, train_local_trees, Forest, Task, TreeParams, DEFAULT_TREES};
use crate::rng::{derive_seed, hash_str};
use crate::wire::{Reader, Writer};

pub const FOREST_FILE: &str = "forest.bin";
pub const FOREST_EVAL_FILE: &str = "forest_evaluation.json";

const MAGIC: &[u8; 4] = b"RFST";

/// Reads the merged forests saved by the forest app, one per split.
pub fn load_forests(path: &Path) -> MlResult<Vec<Forest>> {
    let bytes = std::fs::read(path).map_err(|e| MlError::file(path, e))?;
    let mut r = Reader::new(&bytes, MAGIC)?;
    if r.u8()? != 2 {
        return Err(MlError::file(path, "not a merged forest payload"));
    }
    let count = r.u32()?;
    let body = r.rest();
    let mut at = 0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (f, used) = Forest::decode(&body[at..])?;
        out.push(f);
        at += used;
    }
    if at != body.len() {
        return Err(MlError::file(path, "trailing bytes after forests"));
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct RandomForest {
    splits: Vec<SplitData>,
    task: Option<Task>,
    target: usize,
    mtry: Option<usize>,
    me: usize,
    seed: u64,
    id: String,
    /// Coordinator only: allotments per split, in client order.
    allotments: Vec<Vec<usize>>,
    n_classes: Vec<usize>,
    forests: Vec<Forest>,
    forest_bytes: Vec<u8>,
    scores: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct EvalFile {
    metric: &'static str,
    splits: Vec<SplitScore>,
    mean: Option<f64>,
}

#[derive(Serialize)]
struct SplitScore {
    split: String,
    value: Option<f64>,
    n: f64,
}

impl RandomForest {
    pub fn forests(&self) -> &[Forest] {
        &self.forests
    }

    fn task(&self) -> Task {
        self.task.expect("loaded")
    }

    fn params(&self, s: usize) -> TreeParams {
        TreeParams { task: self.task(), n_classes: self.n_classes[s], mtry: self.mtry }
    }

    /// Seed of this client's trees in split `s`.
    pub fn tree_seed(master: u64, client: &str, split: usize) -> u64 {
        derive_seed(master, &[hash_str(client), split as u64])
    }

    fn header(&self, phase: u8) -> Writer {
        let mut w = Writer::new(MAGIC);
        w.u8(phase).u32(self.splits.len());
        w
    }

    fn open<'a>(&self, bytes: &'a [u8], phase: u8) -> MlResult<Reader<'a>> {
        let mut r = Reader::new(bytes, MAGIC)?;
        let got = r.u8()?;
        if got != phase {
            return Err(MlError::invalid(format!("forest phase {got}, expected {phase}")));
        }
        let count = r.u32()?;
        if count != self.splits.len() {
            return Err(MlError::invalid(format!("{count} splits, expected {}", self.splits.len())));
        }
        Ok(r)
    }

    fn census(&self) -> MlResult<Vec<u8>> {
        let mut w = self.header(1);
        for s in &self.splits {
            let classes = match self.task() {
                Task::Classification => s.train.class_labels()?.into_iter().max().map_or(0, |m| m + 1),
                Task::Regression => 0,
            };
            w.u64(s.train.n_samples() as u64).u32(classes);
        }
        Ok(w.finish())
    }

    fn train(&mut self, global: &[u8]) -> MlResult<Vec<u8>> {
        let mut r = self.open(global, 1)?;
        let clients = r.u32()?;
        let mut mine = Vec::new();
        self.n_classes.clear();
        for _ in 0..self.splits.len() {
            self.n_classes.push(r.u32()?);
            let counts: Vec<usize> = (0..clients).map(|_| r.u32()).collect::<MlResult<_>>()?;
            mine.push(*counts.get(self.me).ok_or_else(|| MlError::invalid("allotment missing for this client"))?);
        }
        r.finish()?;
        let mut w = self.header(2);
        for (s, &n_trees) in mine.iter().enumerate() {
            let split = &self.splits[s];
            let trees = if n_trees == 0 {
                Vec::new()
            } else {
                train_local_trees(&split.train.x, split.train.y.as_slice(), n_trees, self.params(s), Self::tree_seed(self.seed, &self.id, s))?
            };
            w.bytes(&Forest { task: self.task(), n_classes: self.n_classes[s], trees }.encode());
        }
        Ok(w.finish())
    }

    fn evaluate(&mut self, global: &[u8]) -> MlResult<Vec<u8>> {
        let mut r = self.open(global, 2)?;
        let body = r.rest();
        let mut at = 0;
        self.forests.clear();
        for _ in 0..self.splits.len() {
            let (f, used) = Forest::decode(&body[at..])?;
            if f.trees.len() != self.target {
                return Err(MlError::invalid(format!("merged forest has {} trees, expected {}", f.trees.len(), self.target)));
            }
            self.forests.push(f);
            at += used;
        }
        if at != body.len() {
            return Err(MlError::invalid("trailing bytes after merged forests"));
        }
        self.forest_bytes = global.to_vec();
        let mut w = self.header(3);
        for (split, forest) in self.splits.iter().zip(&self.forests) {
            let (score, n) = match &split.test {
                None => (0.0, 0.0),
                Some(test) => {
                    let pred = forest.predict(&test.x);
                    let score = match self.task() {
                        Task::Classification => pred.iter().zip(test.y.iter()).filter(|(p, y)| p == y).count() as f64,
                        Task::Regression => pred.iter().zip(test.y.iter()).map(|(p, y)| (p - y) * (p - y)).sum(),
                    };
                    (score, test.n_samples() as f64)
                }
            };
            w.f64s(&[score, n]);
        }
        Ok(w.finish())
    }
}

impl RoundAlgorithm for RandomForest {
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        let columns = ColumnSpec::from_config(&ctx.config)?;
        self.task = Some(match cfg(ctx.config.str_or("task", "classification"))? {
            "classification" => Task::Classification,
            "regression" => Task::Regression,
            other => return Err(MlError::invalid(format!("unknown forest task {other:?}")).into()),
        });
        self.target = cfg(ctx.config.usize_or("trees", DEFAULT_TREES))?;
        if self.target == 0 {
            return Err(MlError::invalid("trees must be at least 1").into());
        }
        self.mtry = ctx.config.get("mtry").map(|_| cfg(ctx.config.usize_or("mtry", 1))).transpose()?;
        if cfg(ctx.config.bool_or("smpc", false))? {
            ctx.log.warn("smpc ignored: tree exchange is not additive");
        }
        self.splits = load_splits(&ctx.input_dir, &columns)?;
        self.me = ctx.info.clients.iter().position(|c| *c == ctx.info.id).expect("validated setup");
        self.seed = seed_of(&ctx.config)?;
        self.id = ctx.info.id.as_str().to_string();
        Ok(())
    }

    fn local(&mut self, global: Option<&[u8]>) -> AppResult<Local> {
        let Some(global) = global else {
            return Ok(Local::Send(self.census()?));
        };
        let phase = *global.get(4).ok_or_else(|| MlError::invalid("short forest payload"))?;
        match phase {
            1 => Ok(Local::Send(self.train(global)?)),
            2 => Ok(Local::Send(self.evaluate(global)?)),
            3 => {
                let mut r = self.open(global, 3)?;
                self.scores = (0..self.splits.len()).map(|_| r.f64s(2).map(|v| (v[0], v[1]))).collect::<MlResult<_>>()?;
                r.finish()?;
                Ok(Local::Done)
            }
            p => Err(MlError::invalid(format!("unknown forest phase {p}")).into()),
        }
    }

    fn aggregate(&mut self, locals: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
        let phase = *locals[0].1.get(4).ok_or_else(|| MlError::invalid("short forest payload"))?;
        let s_count = self.splits.len();
        match phase {
            1 => {
                let mut sizes = vec![Vec::new(); s_count];
                let mut classes = vec![0usize; s_count];
                for (_, bytes) in &locals {
                    let mut r = self.open(bytes, 1)?;
                    for s in 0..s_count {
                        sizes[s].push(r.u64()?);
                        classes[s] = classes[s].max(r.u32()?);
                    }
                    r.finish()?;
                }
                let mut w = self.header(1);
                w.u32(locals.len());
                self.allotments.clear();
                for s in 0..s_count {
                    let n_classes = if self.task() == Task::Classification { classes[s].max(2) } else { 0 };
                    w.u32(n_classes);
                    let counts = apportion(&sizes[s], self.target)?;
                    for &c in &counts {
                        w.u32(c);
                    }
                    self.allotments.push(counts);
                }
                Ok(w.finish())
            }
            2 => {
                let mut per_split: Vec<Vec<(Vec<_>, usize)>> = vec![Vec::new(); s_count];
                let mut meta = vec![(self.task(), 0usize); s_count];
                for (client, bytes) in &locals {
                    let mut r = self.open(bytes, 2)?;
                    let body = r.rest();
                    let mut at = 0;
                    for s in 0..s_count {
                        let (f, used) = Forest::decode(&body[at..]).map_err(|e| MlError::invalid(format!("{client}: {e}")))?;
                        at += used;
                        meta[s] = (f.task, f.n_classes);
                        let expected = self.allotments[s][per_split[s].len()];
                        per_split[s].push((f.trees, expected));
                    }
                }
                let mut w = self.header(2);
                for (s, locals) in per_split.into_iter().enumerate() {
                    let merged = merge_forests(locals, meta[s].0, meta[s].1, self.target)?;
                    w.bytes(&merged.encode());
                }
                Ok(w.finish())
            }
            3 => {
                let mut sums = vec![(0.0, 0.0); s_count];
                for (_, bytes) in &locals {
                    let mut r = self.open(bytes, 3)?;
                    for sum in sums.iter_mut() {
                        let v = r.f64s(2)?;
                        sum.0 += v[0];
                        sum.1 += v[1];
                    }
                    r.finish()?;
                }
                let mut w = self.header(3);
                for (a, b) in sums {
                    w.f64s(&[a, b]);
                }
                Ok(w.finish())
            }
            p => Err(MlError::invalid(format!("unknown forest phase {p}")).into()),
        }
    }

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()> {
        for (split, forest) in self.splits.iter().zip(&self.forests) {
            let Some(test) = &split.test else { continue };
            let dir = split_output(output_dir, &SplitFiles { name: split.name.clone(), train: Default::default(), test: None });
            ensure_dir(&dir)?;
            write_predictions(&dir.join(PRED_FILE), test.y.as_slice(), &forest.predict(&test.x))?;
        }
        std::fs::write(output_dir.join(FOREST_FILE), &self.forest_bytes).map_err(|e| fedmesh_core::app::AppError::io(output_dir, e))?;
        let (metric, value): (_, fn(f64, f64) -> f64) = match self.task() {
            Task::Classification => ("accuracy", |s, n| s / n),
            Task::Regression => ("rmse", |s, n| (s / n).sqrt()),
        };
        let splits: Vec<SplitScore> = self
            .splits
            .iter()
            .zip(&self.scores)
            .map(|(sp, &(s, n))| SplitScore { split: sp.name.clone(), value: (n > 0.0).then(|| value(s, n)), n })
            .collect();
        let values: Vec<f64> = splits.iter().filter_map(|s| s.value).collect();
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        write_json(&output_dir.join(FOREST_EVAL_FILE), &EvalFile { metric, splits, mean })
    }
}
