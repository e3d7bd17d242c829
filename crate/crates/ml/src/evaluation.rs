use serde::{Deserialize, Serialize};

use crate::error::{MlError, MlResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Binary counts with class 1 as positive.
    pub fn from_predictions(y_true: &[f64], y_pred: &[f64]) -> MlResult<Self> {
        if y_true.len() != y_pred.len() {
            return Err(MlError::invalid(format!("{} labels vs {} predictions", y_true.len(), y_pred.len())));
        }
        let mut c = Self::default();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            for v in [t, p] {
                if v != 0.0 && v != 1.0 {
                    return Err(MlError::invalid(format!("binary evaluation got class {v}")));
                }
            }
            match (t == 1.0, p == 1.0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub mcc: f64,
    /// Metrics reported as 0 because a denominator vanished.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn classification_metrics(c: &ConfusionCounts) -> MlResult<ClassificationMetrics> {
    if c.total() == 0 {
        return Err(MlError::invalid("no samples to evaluate"));
    }
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let accuracy = (tp + tn) / (tp + fp + tn + fn_);
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let f_score = ratio("f_score", 2.0 * tp, 2.0 * tp + fp + fn_);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = ratio("mcc", tp * tn - fp * fn_, den.sqrt());
    Ok(ClassificationMetrics { accuracy, precision, recall, f_score, mcc, undefined })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub n: u64,
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub max_abs: f64,
    /// Ascending.
    pub abs_residuals: Vec<f64>,
}

impl ResidualSummary {
    pub fn from_predictions(y_true: &[f64], y_pred: &[f64]) -> MlResult<Self> {
        if y_true.len() != y_pred.len() {
            return Err(MlError::invalid(format!("{} labels vs {} predictions", y_true.len(), y_pred.len())));
        }
        let mut abs: Vec<f64> = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).collect();
        abs.sort_by(f64::total_cmp);
        Ok(Self {
            n: abs.len() as u64,
            sum_abs: abs.iter().sum(),
            sum_sq: abs.iter().map(|e| e * e).sum(),
            max_abs: abs.last().copied().unwrap_or(0.0),
            abs_residuals: abs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub max_error: f64,
    pub median_ae: f64,
}

fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Pools several summaries. Sums are recomputed over the merged sorted list
/// so pooling is bit-identical to summarizing the concatenated residuals.
pub fn pool_residuals(parts: &[ResidualSummary]) -> ResidualSummary {
    let mut out = ResidualSummary::default();
    for p in parts {
        out.n += p.n;
        out.max_abs = out.max_abs.max(p.max_abs);
        out.abs_residuals = merge_sorted(&out.abs_residuals, &p.abs_residuals);
    }
    out.sum_abs = out.abs_residuals.iter().sum();
    out.sum_sq = out.abs_residuals.iter().map(|e| e * e).sum();
    out
}

pub fn regression_metrics(s: &ResidualSummary) -> MlResult<RegressionMetrics> {
    if s.n == 0 || s.abs_residuals.len() as u64 != s.n {
        return Err(MlError::invalid(format!("residual summary with n = {} and {} residuals", s.n, s.abs_residuals.len())));
    }
    let n = s.n as f64;
    let r = &s.abs_residuals;
    let mid = r.len() / 2;
    let median_ae = if r.len() % 2 == 1 { r[mid] } else { (r[mid - 1] + r[mid]) / 2.0 };
    let mse = s.sum_sq / n;
    Ok(RegressionMetrics { mae: s.sum_abs / n, mse, rmse: mse.sqrt(), max_error: s.max_abs, median_ae })
}

/// A participant's local evaluation payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum LocalEvaluation {
    Classification { counts: ConfusionCounts },
    Regression { summary: ResidualSummary },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

impl Metrics {
    /// Accuracy for classification, RMSE for regression.
    pub fn headline(&self) -> f64 {
        match self {
            Metrics::Classification(m) => m.accuracy,
            Metrics::Regression(m) => m.rmse,
        }
    }
}

pub fn local_metrics(local: &LocalEvaluation) -> MlResult<Metrics> {
    aggregate_evaluation(std::slice::from_ref(local))
}

pub fn aggregate_evaluation(locals: &[LocalEvaluation]) -> MlResult<Metrics> {
    match locals.first() {
        None => Err(MlError::invalid("nothing to aggregate")),
        Some(LocalEvaluation::Classification { .. }) => {
            let mut total = ConfusionCounts::default();
            for l in locals {
                let LocalEvaluation::Classification { counts } = l else {
                    return Err(MlError::invalid("mixed task types in evaluation"));
                };
                total.add(counts);
            }
            Ok(Metrics::Classification(classification_metrics(&total)?))
        }
        Some(LocalEvaluation::Regression { .. }) => {
            let mut parts = Vec::with_capacity(locals.len());
            for l in locals {
                let LocalEvaluation::Regression { summary } = l else {
                    return Err(MlError::invalid("mixed task types in evaluation"));
                };
                parts.push(summary.clone());
            }
            Ok(Metrics::Regression(regression_metrics(&pool_residuals(&parts))?))
        }
    }
}
