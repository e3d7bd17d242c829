//! Workflow apps built on the algorithms of this crate.
//!
//! Common configuration keys: `label_column`, `ignore_columns`, `seed`, and
//! for the regressions `intercept` (default true) and `smpc`.

mod cv;
mod evaluation;
mod forest;
mod normalize;
mod regression;

use std::path::Path;

use fedmesh_core::app::{App, AppConfig, AppError, AppResult, RoundApp};
use fedmesh_core::controller::AppRegistry;
use fedmesh_core::smpc::{AdditiveModel, PlainAdditive, SecureApp};

use crate::data::{discover_splits, ColumnSpec, Dataset};
use crate::error::{MlError, MlResult};

pub use cv::CrossValidation;
pub use evaluation::{EvaluationApp, EvaluationReport, EVALUATION_FILE, LOCAL_EVALUATION_FILE};
pub use forest::{load_forests, RandomForest, FOREST_EVAL_FILE, FOREST_FILE};
pub use normalize::{Normalization, NORMALIZATION_FILE};
pub use regression::{LinregModel, LogregModel, ModelFile, MODEL_FILE};

pub const CROSS_VALIDATION: &str = "cross_validation";
pub const NORMALIZATION: &str = "normalization";
pub const LINEAR_REGRESSION: &str = "linear_regression";
pub const LOGISTIC_REGRESSION: &str = "logistic_regression";
pub const RANDOM_FOREST: &str = "random_forest";
pub const CLASSIFIER_EVALUATION: &str = "classifier_evaluation";
pub const REGRESSION_EVALUATION: &str = "regression_evaluation";

/// Adds every app of this crate to `registry`.
pub fn register_all(registry: &mut AppRegistry) {
    registry.register(CROSS_VALIDATION, |_| Ok(Box::new(RoundApp::new(CrossValidation::default()))));
    registry.register(NORMALIZATION, |_| Ok(Box::new(RoundApp::new(Normalization::default()))));
    registry.register(LINEAR_REGRESSION, |c| additive_app(LinregModel::default(), c));
    registry.register(LOGISTIC_REGRESSION, |c| additive_app(LogregModel::default(), c));
    registry.register(RANDOM_FOREST, |_| Ok(Box::new(RoundApp::new(RandomForest::default()))));
    registry.register(CLASSIFIER_EVALUATION, |_| {
        Ok(Box::new(RoundApp::new(EvaluationApp::new(crate::forest::Task::Classification))))
    });
    registry.register(REGRESSION_EVALUATION, |_| Ok(Box::new(RoundApp::new(EvaluationApp::new(crate::forest::Task::Regression)))));
}

/// Registry with the builtin apps and everything in this crate.
pub fn registry() -> AppRegistry {
    let mut r = AppRegistry::with_builtins();
    register_all(&mut r);
    r
}

fn additive_app<M: AdditiveModel + 'static>(model: M, config: &AppConfig) -> AppResult<Box<dyn App>> {
    if config.bool_or("smpc", false)? {
        Ok(Box::new(SecureApp::new(model)))
    } else {
        Ok(Box::new(RoundApp::new(PlainAdditive::new(model))))
    }
}

fn cfg<T>(r: AppResult<T>) -> MlResult<T> {
    r.map_err(|e| MlError::invalid(e.to_string()))
}

/// One split loaded for model fitting.
#[derive(Debug, Clone)]
pub(crate) struct SplitData {
    pub name: String,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub(crate) fn load_splits(input: &Path, columns: &ColumnSpec) -> MlResult<Vec<SplitData>> {
    let splits = discover_splits(input)?;
    let mut out = Vec::with_capacity(splits.len());
    for s in splits {
        let train = Dataset::read(&s.train, columns)?;
        let test = s.test.as_deref().map(|p| Dataset::read(p, columns)).transpose()?;
        if let Some(t) = &test {
            if t.feature_names != train.feature_names {
                return Err(MlError::file(s.test.unwrap(), "test features differ from training features"));
            }
        }
        if let Some(first) = out.first() {
            let first: &SplitData = first;
            if first.train.feature_names != train.feature_names {
                return Err(MlError::file(&s.train, "features differ between splits"));
            }
        }
        out.push(SplitData { name: s.name, train, test });
    }
    Ok(out)
}

pub(crate) fn seed_of(config: &AppConfig) -> MlResult<u64> {
    cfg(config.u64_or("seed", 0))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let body = serde_json::to_vec_pretty(value).map_err(AppError::failure)?;
    std::fs::write(path, body).map_err(|e| AppError::io(path, e))
}

pub(crate) fn ensure_dir(path: &Path) -> AppResult<()> {
    std::fs::create_dir_all(path).map_err(|e| AppError::io(path, e))
}
