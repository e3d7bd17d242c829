//! Payloads: local `"NRML" | split count u32 | per split: moments vector`
//! where a moments vector is `dim u32 | (1 + 5 dim) x f64`; global
//! `"NRMG" | split count u32 | per split: dim u32 | shift | scale |
//! passthrough count u32 | passthrough feature indices u32`.

use std::path::{Path, PathBuf};

use fedmesh_core::app::{AppResult, Local, RoundAlgorithm, SetupContext, StepLog};
use fedmesh_core::ClientId;
use nalgebra::DMatrix;
use serde::Serialize;

use super::{cfg, write_json};
use crate::data::{discover_splits, parse_cell, read_table, split_output, write_table, ColumnSpec, Table, TEST_FILE, TRAIN_FILE};
use crate::error::{MlError, MlResult};
use crate::normalize::{aggregate_norm, apply_scaling, Moments, Scaling, ScalingMode};
use crate::wire::{Reader, Writer};

pub const NORMALIZATION_FILE: &str = "normalization.json";

struct SplitTables {
    name: String,
    train: (PathBuf, Table),
    test: Option<(PathBuf, Table)>,
}

/// Scales feature columns with parameters pooled over all participants'
/// training rows (config `mode`: standardize, minmax or maxabs). Label and
/// ignored columns pass through.
#[derive(Default)]
pub struct Normalization {
    mode: Option<ScalingMode>,
    columns: ColumnSpec,
    splits: Vec<SplitTables>,
    features: Vec<usize>,
    params: Vec<Scaling>,
    log: StepLog,
}

#[derive(Serialize)]
struct ParamsFile<'a> {
    features: Vec<&'a str>,
    splits: Vec<SplitParams<'a>>,
}

#[derive(Serialize)]
struct SplitParams<'a> {
    split: &'a str,
    #[serde(flatten)]
    scaling: &'a Scaling,
}

fn features_matrix(path: &Path, table: &Table, features: &[usize]) -> MlResult<DMatrix<f64>> {
    let mut x = DMatrix::zeros(table.rows.len(), features.len());
    for r in 0..table.rows.len() {
        for (j, &c) in features.iter().enumerate() {
            x[(r, j)] = parse_cell(path, table, r, c)?;
        }
    }
    Ok(x)
}

impl Normalization {
    fn feature_name(&self, j: usize) -> String {
        self.splits.first().and_then(|s| self.features.get(j).map(|&c| s.train.1.header[c].clone())).unwrap_or_else(|| format!("#{j}"))
    }

    fn scaled(&self, path: &Path, table: &Table, params: &Scaling) -> MlResult<Table> {
        let mut x = features_matrix(path, table, &self.features)?;
        apply_scaling(&mut x, params);
        let mut out = table.clone();
        for (r, row) in out.rows.iter_mut().enumerate() {
            for (j, &c) in self.features.iter().enumerate() {
                if !params.passthrough.contains(&j) {
                    row[c] = x[(r, j)].to_string();
                }
            }
        }
        Ok(out)
    }
}

impl RoundAlgorithm for Normalization {
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        self.mode = Some(cfg(ctx.config.str_or("mode", "standardize"))?.parse()?);
        self.columns = ColumnSpec::from_config(&ctx.config)?;
        self.log = ctx.log.clone();
        for s in discover_splits(&ctx.input_dir)? {
            let train = read_table(&s.train)?;
            let test = s.test.map(|p| read_table(&p).map(|t| (p, t))).transpose()?;
            let features = self.columns.feature_indices(&train)?;
            if !self.splits.is_empty() && features != self.features {
                return Err(MlError::file(&s.train, "feature columns differ between splits").into());
            }
            self.features = features;
            self.splits.push(SplitTables { name: s.name, train: (s.train, train), test });
        }
        Ok(())
    }

    fn local(&mut self, global: Option<&[u8]>) -> AppResult<Local> {
        let Some(global) = global else {
            let mut w = Writer::new(b"NRML");
            w.u32(self.splits.len());
            for s in &self.splits {
                let m = Moments::of(&features_matrix(&s.train.0, &s.train.1, &self.features)?);
                w.u32(m.dim()).f64s(&m.to_vec());
            }
            return Ok(Local::Send(w.finish()));
        };
        let mut r = Reader::new(global, b"NRMG")?;
        let count = r.u32()?;
        if count != self.splits.len() {
            return Err(MlError::invalid(format!("{count} split parameters for {} splits", self.splits.len())).into());
        }
        let mode = self.mode.expect("loaded");
        self.params.clear();
        for _ in 0..count {
            let d = r.u32()?;
            let shift = r.f64s(d)?;
            let scale = r.f64s(d)?;
            let passthrough: Vec<usize> = (0..r.u32()?).map(|_| r.u32()).collect::<MlResult<_>>()?;
            for &j in &passthrough {
                self.log.warn(format!("feature {} has zero spread; left unscaled", self.feature_name(j)));
            }
            self.params.push(Scaling { mode, shift, scale, passthrough });
        }
        r.finish()?;
        Ok(Local::Done)
    }

    fn aggregate(&mut self, locals: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
        let mut pooled: Vec<Option<Moments>> = vec![None; self.splits.len()];
        for (client, bytes) in &locals {
            let mut r = Reader::new(bytes, b"NRML")?;
            if r.u32()? != self.splits.len() {
                return Err(MlError::invalid(format!("{client} sent a different number of splits")).into());
            }
            for slot in pooled.iter_mut() {
                let d = r.u32()?;
                let m = Moments::from_slice(&r.f64s(1 + 5 * d)?)?;
                match slot {
                    Some(p) => p.merge(&m)?,
                    None => *slot = Some(m),
                }
            }
            r.finish()?;
        }
        let mode = self.mode.expect("loaded");
        let mut w = Writer::new(b"NRMG");
        w.u32(pooled.len());
        for (s, m) in self.splits.iter().zip(&pooled) {
            let scaling = aggregate_norm(m.as_ref().expect("every client sent every split"), mode)?;
            if scaling.shift.len() != self.features.len() {
                return Err(MlError::invalid(format!("{} features pooled in {}", scaling.shift.len(), s.name)).into());
            }
            w.u32(scaling.shift.len()).f64s(&scaling.shift).f64s(&scaling.scale).u32(scaling.passthrough.len());
            for &j in &scaling.passthrough {
                w.u32(j);
            }
        }
        Ok(w.finish())
    }

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()> {
        for (s, params) in self.splits.iter().zip(&self.params) {
            let split = crate::data::SplitFiles { name: s.name.clone(), train: s.train.0.clone(), test: None };
            let dir = split_output(output_dir, &split);
            let train_name = if s.name.is_empty() {
                s.train.0.file_name().expect("file path").to_owned()
            } else {
                TRAIN_FILE.into()
            };
            write_table(&dir.join(train_name), &self.scaled(&s.train.0, &s.train.1, params)?)?;
            if let Some((p, t)) = &s.test {
                write_table(&dir.join(TEST_FILE), &self.scaled(p, t, params)?)?;
            }
        }
        let header = &self.splits.first().map(|s| s.train.1.header.clone()).unwrap_or_default();
        let file = ParamsFile {
            features: self.features.iter().map(|&c| header[c].as_str()).collect(),
            splits: self.splits.iter().zip(&self.params).map(|(s, p)| SplitParams { split: &s.name, scaling: p }).collect(),
        };
        write_json(&output_dir.join(NORMALIZATION_FILE), &file)
    }
}
