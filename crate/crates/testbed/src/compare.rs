//! Federated versus centralized versus individual models on the same
//! cross-validation folds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedmesh_core::app::AppConfig;
use fedmesh_core::controller::StepSpec;
use fedmesh_core::protocol::ClientId;
use fedmesh_ml::apps::{self, load_forests, ModelFile, RandomForest, FOREST_FILE, MODEL_FILE};
use fedmesh_ml::centralized;
use fedmesh_ml::data::{discover_splits, read_predictions, ColumnSpec, Dataset, Table, PRED_FILE};
use fedmesh_ml::evaluation::{local_metrics, ConfusionCounts, LocalEvaluation, Metrics, ResidualSummary};
use fedmesh_ml::forest::{Task, TreeParams, DEFAULT_TREES};
use fedmesh_ml::logreg::{predict_class, DEFAULT_MAX_ITER, DEFAULT_TOL};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::partition::{write_partitions, SplitPlan};
use crate::sim::{client_id, run_simulation, SimConfig};
use crate::{TestbedError, TestbedResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linreg,
    Logreg,
    RfClass,
    RfReg,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linreg => "linreg",
            ModelKind::Logreg => "logreg",
            ModelKind::RfClass => "rf_class",
            ModelKind::RfReg => "rf_reg",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, ModelKind::Logreg | ModelKind::RfClass)
    }

    pub fn metric(self) -> &'static str {
        if self.is_classification() {
            "accuracy"
        } else {
            "rmse"
        }
    }

    fn normalizes(self) -> bool {
        matches!(self, ModelKind::Linreg | ModelKind::Logreg)
    }
}

impl FromStr for ModelKind {
    type Err = TestbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linreg" => Ok(ModelKind::Linreg),
            "logreg" => Ok(ModelKind::Logreg),
            "rf_class" => Ok(ModelKind::RfClass),
            "rf_reg" => Ok(ModelKind::RfReg),
            other => Err(TestbedError::Config(format!("unknown model {other:?} (linreg, logreg, rf_class, rf_reg)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub model: ModelKind,
    pub folds: usize,
    pub seed: u64,
    pub trees: usize,
    /// Also fit one model per client on its own rows.
    pub individual: bool,
    pub smpc: bool,
    pub poll_interval_ms: u64,
    pub label_column: Option<String>,
    pub ignore_columns: Vec<String>,
    pub work_dir: PathBuf,
}

impl CompareOptions {
    pub fn new(model: ModelKind, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            model,
            folds: 10,
            seed: 0,
            trees: DEFAULT_TREES,
            individual: true,
            smpc: false,
            poll_interval_ms: 5,
            label_column: None,
            ignore_columns: Vec::new(),
            work_dir: work_dir.into(),
        }
    }

    fn with_columns(&self, mut config: AppConfig) -> AppConfig {
        if let Some(l) = &self.label_column {
            config.set_default("label_column", l.clone());
        }
        if !self.ignore_columns.is_empty() {
            config.set_default("ignore_columns", self.ignore_columns.clone());
        }
        config
    }

    fn columns(&self) -> ColumnSpec {
        ColumnSpec { label: self.label_column.clone(), ignore: self.ignore_columns.clone() }
    }

    /// Cross-validation, optional normalization, the model, then evaluation.
    pub fn steps(&self) -> Vec<StepSpec> {
        let step = |app: &str, config: AppConfig| StepSpec { app: app.into(), config: self.with_columns(config) };
        let mut steps = vec![step(apps::CROSS_VALIDATION, AppConfig::new().with("folds", self.folds))];
        if self.model.normalizes() {
            steps.push(step(apps::NORMALIZATION, AppConfig::new().with("mode", "standardize")));
        }
        let model = match self.model {
            ModelKind::Linreg => step(apps::LINEAR_REGRESSION, AppConfig::new().with("smpc", self.smpc)),
            ModelKind::Logreg => step(apps::LOGISTIC_REGRESSION, AppConfig::new().with("smpc", self.smpc)),
            ModelKind::RfClass => step(apps::RANDOM_FOREST, AppConfig::new().with("task", "classification").with("trees", self.trees)),
            ModelKind::RfReg => step(apps::RANDOM_FOREST, AppConfig::new().with("task", "regression").with("trees", self.trees)),
        };
        steps.push(model);
        let eval = if self.model.is_classification() { apps::CLASSIFIER_EVALUATION } else { apps::REGRESSION_EVALUATION };
        steps.push(step(eval, AppConfig::new()));
        steps
    }

    fn model_step(&self) -> usize {
        if self.model.normalizes() {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: String,
    pub centralized: f64,
    pub federated: f64,
    /// Per client, on its own test rows; `None` when the fit failed.
    pub individual_local: Vec<Option<f64>>,
    /// Per client, on the pooled test rows.
    pub individual_central: Vec<Option<f64>>,
    /// Largest coefficient difference between federated and centralized.
    pub beta_max_diff: Option<f64>,
    /// Whether every federated test prediction equals the centralized one.
    pub predictions_identical: Option<bool>,
    /// Whether the federated Newton iterations converged (logreg only).
    pub converged: Option<bool>,
    pub forest_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub model: ModelKind,
    pub metric: String,
    pub seed: u64,
    pub clients: Vec<ClientId>,
    pub folds: Vec<FoldResult>,
    pub federated_seconds: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Comparison {
    pub fn mean_centralized(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.centralized))
    }

    pub fn mean_federated(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.federated))
    }

    /// Mean over folds and clients; failed fits are left out.
    pub fn mean_individual_local(&self) -> f64 {
        mean(self.folds.iter().flat_map(|f| f.individual_local.iter().flatten().copied()))
    }

    pub fn mean_individual_central(&self) -> f64 {
        mean(self.folds.iter().flat_map(|f| f.individual_central.iter().flatten().copied()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,arm,client,test_set,metric,value\n");
        let m = &self.metric;
        for f in &self.folds {
            let _ = writeln!(out, "{},centralized,,central,{m},{}", f.fold, f.centralized);
            let _ = writeln!(out, "{},federated,,central,{m},{}", f.fold, f.federated);
            for (i, c) in self.clients.iter().enumerate() {
                let show = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                let _ = writeln!(out, "{},individual,{c},local,{m},{}", f.fold, show(f.individual_local.get(i).copied().flatten()));
                let _ = writeln!(out, "{},individual,{c},central,{m},{}", f.fold, show(f.individual_central.get(i).copied().flatten()));
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} over {} folds, {} clients, seed {}", self.model.name(), self.folds.len(), self.clients.len(), self.seed);
        let _ = writeln!(out, "{:<24} {:>12}", "arm", format!("mean {}", self.metric));
        let _ = writeln!(out, "{:<24} {:>12.6}", "centralized", self.mean_centralized());
        let _ = writeln!(out, "{:<24} {:>12.6}", "federated", self.mean_federated());
        if self.folds.iter().any(|f| !f.individual_local.is_empty()) {
            let _ = writeln!(out, "{:<24} {:>12.6}", "individual (local test)", self.mean_individual_local());
            let _ = writeln!(out, "{:<24} {:>12.6}", "individual (central)", self.mean_individual_central());
        }
        let diffs: Vec<f64> = self.folds.iter().filter_map(|f| f.beta_max_diff).collect();
        if !diffs.is_empty() {
            let _ = writeln!(out, "max |beta_fed - beta_central|: {:.3e}", diffs.iter().copied().fold(0.0, f64::max));
        }
        let same: Vec<bool> = self.folds.iter().filter_map(|f| f.predictions_identical).collect();
        if !same.is_empty() {
            let _ = writeln!(out, "identical predictions in {}/{} folds", same.iter().filter(|s| **s).count(), same.len());
        }
        let sizes: Vec<usize> = self.folds.iter().filter_map(|f| f.forest_size).collect();
        if !sizes.is_empty() {
            let _ = writeln!(out, "merged forest sizes: {sizes:?}");
        }
        let _ = writeln!(out, "federated run took {:.3} s", self.federated_seconds);
        out
    }

    /// Writes `comparison.csv`, `comparison.json` and `summary.txt`.
    pub fn write(&self, dir: &Path) -> TestbedResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| TestbedError::io(dir, e))?;
        let put = |name: &str, body: String| std::fs::write(dir.join(name), body).map_err(|e| TestbedError::io(dir.join(name), e));
        put("comparison.csv", self.to_csv())?;
        put("comparison.json", serde_json::to_string_pretty(self).expect("comparison serializes"))?;
        put("summary.txt", self.summary())
    }
}

/// A model fitted by one of the non-federated arms.
enum Fitted {
    Beta(DVector<f64>),
    Forest(fedmesh_ml::forest::Forest),
}

impl Fitted {
    fn predict(&self, model: ModelKind, data: &Dataset) -> Vec<f64> {
        match self {
            Fitted::Beta(b) if model == ModelKind::Logreg => predict_class(&data.design(true), b),
            Fitted::Beta(b) => (data.design(true) * b).iter().copied().collect(),
            Fitted::Forest(f) => f.predict(&data.x),
        }
    }
}

fn n_classes(y: &DVector<f64>) -> usize {
    (y.iter().fold(0.0f64, |m, v| m.max(*v)) as usize + 1).max(2)
}

fn fit(model: ModelKind, train: &Dataset, trees: usize, seed: u64) -> TestbedResult<Fitted> {
    Ok(match model {
        ModelKind::Linreg => Fitted::Beta(centralized::ols(&train.design(true), &train.y)?),
        ModelKind::Logreg => Fitted::Beta(centralized::newton_logreg(&train.design(true), &train.y, DEFAULT_TOL, DEFAULT_MAX_ITER).beta),
        ModelKind::RfClass | ModelKind::RfReg => {
            let params = if model == ModelKind::RfClass {
                train.class_labels()?;
                TreeParams { task: Task::Classification, n_classes: n_classes(&train.y), mtry: None }
            } else {
                TreeParams { task: Task::Regression, n_classes: 0, mtry: None }
            };
            Fitted::Forest(centralized::forest(&train.x, train.y.as_slice(), trees, params, seed)?)
        }
    })
}

fn score(model: ModelKind, y_true: &[f64], y_pred: &[f64]) -> TestbedResult<f64> {
    let local = if model.is_classification() {
        LocalEvaluation::Classification { counts: ConfusionCounts::from_predictions(y_true, y_pred)? }
    } else {
        LocalEvaluation::Regression { summary: ResidualSummary::from_predictions(y_true, y_pred)? }
    };
    Ok(local_metrics(&local).map(|m: Metrics| m.headline())?)
}

struct ClientFold {
    train: Dataset,
    test: Dataset,
}

fn read_folds(dir: &Path, columns: &ColumnSpec) -> TestbedResult<Vec<(String, ClientFold)>> {
    discover_splits(dir)?
        .into_iter()
        .map(|s| {
            let test = s.test.as_ref().ok_or_else(|| TestbedError::Failed(format!("{} has no test file", s.train.display())))?;
            Ok((s.name.clone(), ClientFold { train: Dataset::read(&s.train, columns)?, test: Dataset::read(test, columns)? }))
        })
        .collect()
}

fn missing(what: &str) -> TestbedError {
    TestbedError::Failed(format!("federated run left no {what}"))
}

/// Partitions `table` by `plan`, runs the federated workflow once and fits
/// the centralized and individual arms on the very same fold files.
pub fn run_comparison(table: &Table, plan: &SplitPlan, opts: &CompareOptions) -> TestbedResult<Comparison> {
    let registry = fedmesh_ml::registry();
    let data_dirs = write_partitions(table, plan, opts.seed, &opts.work_dir.join("data"))?;
    let mut config = SimConfig::new(data_dirs, opts.steps());
    config.seed = opts.seed;
    config.repetitions = 1;
    config.poll_interval_ms = opts.poll_interval_ms;
    config.work_dir = Some(opts.work_dir.join("runs"));
    let report = run_simulation(&config, &registry)?;
    let rep = &report.repetitions[0];
    if let Some(f) = &rep.failure {
        return Err(TestbedError::Failed(f.clone()));
    }
    let evaluation = rep.evaluation.as_ref().ok_or_else(|| missing("evaluation report"))?;
    let columns = opts.columns();
    let m = opts.model_step();
    let n = config.n_clients;

    let mut per_client = Vec::new();
    for i in 0..n {
        let input = rep.step_output(i, m - 1).ok_or_else(|| missing("model input"))?;
        per_client.push(read_folds(&input, &columns)?);
    }
    let model_out: Vec<PathBuf> = (0..n).map(|i| rep.step_output(i, m).ok_or_else(|| missing("model output"))).collect::<TestbedResult<_>>()?;
    let model_file = match opts.model {
        ModelKind::Linreg | ModelKind::Logreg => Some(ModelFile::load(&model_out[0].join(MODEL_FILE))?),
        _ => None,
    };
    let forests = match opts.model {
        ModelKind::RfClass | ModelKind::RfReg => Some(load_forests(&model_out[0].join(FOREST_FILE))?),
        _ => None,
    };

    let mut folds = Vec::new();
    for s in 0..per_client[0].len() {
        let name = per_client[0][s].0.clone();
        let trains: Vec<Dataset> = per_client.iter().map(|c| c[s].1.train.clone()).collect();
        let tests: Vec<Dataset> = per_client.iter().map(|c| c[s].1.test.clone()).collect();
        let pooled_train = Dataset::concat(&trains)?;
        let pooled_test = Dataset::concat(&tests)?;

        let central = fit(opts.model, &pooled_train, opts.trees, RandomForest::tree_seed(opts.seed, "centralized", s))?;
        let centralized = score(opts.model, pooled_test.y.as_slice(), &central.predict(opts.model, &pooled_test))?;
        let federated = evaluation
            .splits
            .get(s)
            .map(|m| m.metrics.headline())
            .ok_or_else(|| missing("metrics for every fold"))?;

        let (mut individual_local, mut individual_central) = (Vec::new(), Vec::new());
        if opts.individual {
            for (i, (train, test)) in trains.iter().zip(&tests).enumerate() {
                let seed = RandomForest::tree_seed(opts.seed, client_id(i).as_str(), s);
                match fit(opts.model, train, opts.trees, seed) {
                    Ok(model) => {
                        individual_local.push(score(opts.model, test.y.as_slice(), &model.predict(opts.model, test)).ok());
                        individual_central
                            .push(score(opts.model, pooled_test.y.as_slice(), &model.predict(opts.model, &pooled_test)).ok());
                    }
                    Err(e) => {
                        log::warn!("fold {name}: individual model of {} failed: {e}", client_id(i));
                        individual_local.push(None);
                        individual_central.push(None);
                    }
                }
            }
        }

        let mut beta_max_diff = None;
        let mut predictions_identical = None;
        let mut converged = None;
        if let (Some(mf), Fitted::Beta(beta)) = (&model_file, &central) {
            let split = mf.splits.get(s).ok_or_else(|| missing("coefficients for every fold"))?;
            converged = split.converged;
            let fed = &split.beta;
            beta_max_diff = Some(fed.iter().zip(beta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            if opts.model == ModelKind::Logreg {
                let mut same = true;
                for (i, test) in tests.iter().enumerate() {
                    let dir = if name.is_empty() { model_out[i].clone() } else { model_out[i].join(&name) };
                    let (_, fed_pred) = read_predictions(&dir.join(PRED_FILE))?;
                    same &= fed_pred == central.predict(opts.model, test);
                }
                predictions_identical = Some(same);
            }
        }
        let forest_size = forests.as_ref().and_then(|f| f.get(s)).map(|f| f.trees.len());

        folds.push(FoldResult {
            fold: name,
            centralized,
            federated,
            individual_local,
            individual_central,
            beta_max_diff,
            predictions_identical,
            converged,
            forest_size,
        });
    }
    Ok(Comparison {
        model: opts.model,
        metric: opts.model.metric().into(),
        seed: opts.seed,
        clients: config.client_ids(),
        folds,
        federated_seconds: rep.wall_seconds,
    })
}
