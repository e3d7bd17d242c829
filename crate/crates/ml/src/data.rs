//! CSV tables, numeric datasets and the on-disk split layout.
//!
//! A step directory is either *split* (`split_<i>/train.csv` and
//! `split_<i>/test.csv` for every fold) or *flat* (exactly one CSV file,
//! used whole for training).

use std::path::{Path, PathBuf};

use fedmesh_core::app::AppConfig;
use nalgebra::{DMatrix, DVector};

use crate::error::{MlError, MlResult};

/// A CSV file with a header row, kept as text so identifier columns survive
/// untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Table {
        Table { header: self.header.clone(), rows: indices.iter().map(|&i| self.rows[i].clone()).collect() }
    }

    pub fn concat(tables: &[Table]) -> MlResult<Table> {
        let first = tables.first().ok_or_else(|| MlError::invalid("no tables to concatenate"))?;
        let mut rows = Vec::new();
        for t in tables {
            if t.header != first.header {
                return Err(MlError::invalid(format!("header mismatch: {:?} vs {:?}", t.header, first.header)));
            }
            rows.extend(t.rows.iter().cloned());
        }
        Ok(Table { header: first.header.clone(), rows })
    }
}

pub fn read_table(path: &Path) -> MlResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MlError::file(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| MlError::file(path, e))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(MlError::file(path, "missing header row"));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| MlError::Data {
            path: path.to_path_buf(),
            row: i + 1,
            column: "-".into(),
            message: e.to_string(),
        })?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

pub fn write_table(path: &Path, table: &Table) -> MlResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| MlError::file(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| MlError::file(path, e))?;
    w.write_record(&table.header).map_err(|e| MlError::file(path, e))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| MlError::file(path, e))?;
    }
    w.flush().map_err(|e| MlError::file(path, e))
}

/// Which columns hold the label and which to leave out of the features.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnSpec {
    /// Defaults to the last column.
    pub label: Option<String>,
    pub ignore: Vec<String>,
}

impl ColumnSpec {
    pub fn from_config(config: &AppConfig) -> MlResult<Self> {
        Ok(Self {
            label: config.opt_str("label_column").map_err(|e| MlError::invalid(e.to_string()))?.map(str::to_string),
            ignore: config.str_list("ignore_columns").map_err(|e| MlError::invalid(e.to_string()))?,
        })
    }

    pub fn label_index(&self, table: &Table) -> MlResult<usize> {
        match &self.label {
            Some(name) => table.column(name).ok_or_else(|| MlError::invalid(format!("label column {name:?} not found"))),
            None => table.header.len().checked_sub(1).ok_or_else(|| MlError::invalid("table has no columns")),
        }
    }

    /// Indices of feature columns, in file order.
    pub fn feature_indices(&self, table: &Table) -> MlResult<Vec<usize>> {
        let label = self.label_index(table)?;
        for name in &self.ignore {
            if table.column(name).is_none() {
                return Err(MlError::invalid(format!("ignored column {name:?} not found")));
            }
        }
        Ok((0..table.header.len()).filter(|&i| i != label && !self.ignore.contains(&table.header[i])).collect())
    }
}

pub fn parse_cell(table_path: &Path, table: &Table, row: usize, col: usize) -> MlResult<f64> {
    let cell = &table.rows[row][col];
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(MlError::Data {
            path: table_path.to_path_buf(),
            row: row + 1,
            column: table.header[col].clone(),
            message: format!("non-finite value {cell:?}"),
        }),
        Err(_) => Err(MlError::Data {
            path: table_path.to_path_buf(),
            row: row + 1,
            column: table.header[col].clone(),
            message: if cell.is_empty() { "missing value".into() } else { format!("not a number: {cell:?}") },
        }),
    }
}

/// Numeric features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn from_table(path: &Path, table: &Table, columns: &ColumnSpec) -> MlResult<Self> {
        let label = columns.label_index(table)?;
        let features = columns.feature_indices(table)?;
        let n = table.rows.len();
        let mut x = DMatrix::zeros(n, features.len());
        let mut y = DVector::zeros(n);
        for r in 0..n {
            if table.rows[r].len() != table.header.len() {
                return Err(MlError::Data {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: "-".into(),
                    message: format!("{} fields, header has {}", table.rows[r].len(), table.header.len()),
                });
            }
            for (j, &c) in features.iter().enumerate() {
                x[(r, j)] = parse_cell(path, table, r, c)?;
            }
            y[r] = parse_cell(path, table, r, label)?;
        }
        Ok(Self { feature_names: features.iter().map(|&c| table.header[c].clone()).collect(), x, y })
    }

    pub fn read(path: &Path, columns: &ColumnSpec) -> MlResult<Self> {
        Self::from_table(path, &read_table(path)?, columns)
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Feature matrix, with a leading column of ones when `intercept`.
    pub fn design(&self, intercept: bool) -> DMatrix<f64> {
        if intercept {
            self.x.clone().insert_column(0, 1.0)
        } else {
            self.x.clone()
        }
    }

    pub fn concat(parts: &[Dataset]) -> MlResult<Dataset> {
        let first = parts.first().ok_or_else(|| MlError::invalid("no datasets to concatenate"))?;
        let n: usize = parts.iter().map(Dataset::n_samples).sum();
        let d = first.n_features();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut at = 0;
        for p in parts {
            if p.feature_names != first.feature_names {
                return Err(MlError::invalid("datasets have different feature columns"));
            }
            x.rows_mut(at, p.n_samples()).copy_from(&p.x);
            y.rows_mut(at, p.n_samples()).copy_from(&p.y);
            at += p.n_samples();
        }
        Ok(Dataset { feature_names: first.feature_names.clone(), x, y })
    }

    /// Labels as class indices; fails on anything but non-negative integers.
    pub fn class_labels(&self) -> MlResult<Vec<usize>> {
        self.y
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(MlError::invalid(format!("class label {v} is not a non-negative integer")))
                }
            })
            .collect()
    }
}

/// Training and optional test file of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitFiles {
    pub name: String,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
}

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const PRED_FILE: &str = "pred.csv";

pub fn split_dir_name(i: usize) -> String {
    format!("split_{i}")
}

/// Enumerates the splits of a step directory, in index order.
pub fn discover_splits(dir: &Path) -> MlResult<Vec<SplitFiles>> {
    let entries = std::fs::read_dir(dir).map_err(|e| MlError::file(dir, e))?;
    let mut splits = Vec::new();
    let mut csvs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| MlError::file(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        let path = entry.path();
        if path.is_dir() {
            if let Some(idx) = name.strip_prefix("split_").and_then(|s| s.parse::<usize>().ok()) {
                splits.push((idx, name, path));
            }
        } else if name.ends_with(".csv") {
            csvs.push(path);
        }
    }
    if !splits.is_empty() {
        splits.sort();
        return splits
            .into_iter()
            .map(|(_, name, path)| {
                let train = path.join(TRAIN_FILE);
                if !train.exists() {
                    return Err(MlError::file(&train, "missing training file"));
                }
                let test = path.join(TEST_FILE);
                Ok(SplitFiles { name, train, test: test.exists().then_some(test) })
            })
            .collect();
    }
    match csvs.len() {
        1 => Ok(vec![SplitFiles { name: String::new(), train: csvs.remove(0), test: None }]),
        0 => Err(MlError::file(dir, "no input: neither split directories nor a CSV file")),
        n => Err(MlError::file(dir, format!("{n} CSV files; expected exactly one or a split layout"))),
    }
}

/// Where a split's outputs go inside `output_dir`.
pub fn split_output(output_dir: &Path, split: &SplitFiles) -> PathBuf {
    if split.name.is_empty() {
        output_dir.to_path_buf()
    } else {
        output_dir.join(&split.name)
    }
}

/// Writes `y_true,y_pred` rows.
pub fn write_predictions(path: &Path, y_true: &[f64], y_pred: &[f64]) -> MlResult<()> {
    let table = Table {
        header: vec!["y_true".into(), "y_pred".into()],
        rows: y_true.iter().zip(y_pred).map(|(t, p)| vec![t.to_string(), p.to_string()]).collect(),
    };
    write_table(path, &table)
}

pub fn read_predictions(path: &Path) -> MlResult<(Vec<f64>, Vec<f64>)> {
    let table = read_table(path)?;
    let t = table.column("y_true").ok_or_else(|| MlError::file(path, "missing y_true column"))?;
    let p = table.column("y_pred").ok_or_else(|| MlError::file(path, "missing y_pred column"))?;
    let mut yt = Vec::with_capacity(table.rows.len());
    let mut yp = Vec::with_capacity(table.rows.len());
    for r in 0..table.rows.len() {
        yt.push(parse_cell(path, &table, r, t)?);
        yp.push(parse_cell(path, &table, r, p)?);
    }
    Ok((yt, yp))
}
