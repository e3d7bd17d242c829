use std::path::Path;

use fedmesh_core::app::{AppResult, Local, RoundAlgorithm, SetupContext};
use fedmesh_core::ClientId;

use super::{cfg, seed_of};
use crate::cv::kfold_split;
use crate::data::{discover_splits, read_table, split_dir_name, write_table, Table, TEST_FILE, TRAIN_FILE};
use crate::error::MlError;
use crate::rng::{derive_seed, hash_str};

/// Splits each participant's own rows into `folds` train/test pairs
/// (config `folds`, default 10). Nothing is exchanged.
#[derive(Debug, Default)]
pub struct CrossValidation {
    table: Option<Table>,
    folds: usize,
    seed: u64,
}

impl RoundAlgorithm for CrossValidation {
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()> {
        let splits = discover_splits(&ctx.input_dir)?;
        let [single] = splits.as_slice() else {
            return Err(MlError::file(&ctx.input_dir, "cross-validation expects one CSV file").into());
        };
        if !single.name.is_empty() {
            return Err(MlError::file(&ctx.input_dir, "input is already split").into());
        }
        let table = read_table(&single.train)?;
        self.folds = cfg(ctx.config.usize_or("folds", 10))?;
        self.seed = derive_seed(seed_of(&ctx.config)?, &[hash_str(ctx.info.id.as_str())]);
        kfold_split(table.rows.len(), self.folds, self.seed)?;
        ctx.log.info(format!("{} rows into {} folds", table.rows.len(), self.folds));
        self.table = Some(table);
        Ok(())
    }

    fn local(&mut self, _: Option<&[u8]>) -> AppResult<Local> {
        Ok(Local::Done)
    }

    fn aggregate(&mut self, _: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
        Err(MlError::invalid("cross-validation has nothing to aggregate").into())
    }

    fn write_output(&mut self, output_dir: &Path) -> AppResult<()> {
        let table = self.table.as_ref().expect("loaded");
        for (i, fold) in kfold_split(table.rows.len(), self.folds, self.seed)?.iter().enumerate() {
            let dir = output_dir.join(split_dir_name(i));
            write_table(&dir.join(TRAIN_FILE), &table.select_rows(&fold.train))?;
            write_table(&dir.join(TEST_FILE), &table.select_rows(&fold.test))?;
        }
        Ok(())
    }
}
