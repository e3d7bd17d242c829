use std::path::{Path, PathBuf};

use fedmesh_ml::data::{read_table, write_table, Table};
use fedmesh_ml::rng::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{TestbedError, TestbedResult};

pub const DATA_FILE: &str = "data.csv";

/// Share of the rows each client receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fractions: Vec<f64>,
}

impl SplitPlan {
    pub fn new(fractions: Vec<f64>) -> TestbedResult<Self> {
        if fractions.is_empty() || fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(TestbedError::Config(format!("invalid fractions {fractions:?}")));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TestbedError::Config(format!("fractions sum to {sum}, not 1")));
        }
        Ok(Self { fractions })
    }

    pub fn even(n: usize) -> Self {
        Self { fractions: vec![1.0 / n as f64; n] }
    }

    /// The uneven five-client layout: 10%, 15%, 15%, 30%, 30%.
    pub fn uneven_five() -> Self {
        Self { fractions: vec![0.10, 0.15, 0.15, 0.30, 0.30] }
    }

    /// Parses a comma-separated list such as `0.5,0.5`.
    pub fn parse(s: &str) -> TestbedResult<Self> {
        let fractions = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| TestbedError::Config(format!("fraction {p:?}: {e}"))))
            .collect::<TestbedResult<_>>()?;
        Self::new(fractions)
    }

    /// Row counts by largest remainder; ties go to the lower index.
    pub fn counts(&self, rows: usize) -> TestbedResult<Vec<usize>> {
        if rows < self.fractions.len() {
            return Err(TestbedError::Config(format!("{rows} rows for {} clients", self.fractions.len())));
        }
        let quotas: Vec<f64> = self.fractions.iter().map(|f| f * rows as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().take(rows.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

/// Shuffles the rows of `table` by `seed` and hands out contiguous runs.
pub fn partition_table(table: &Table, plan: &SplitPlan, seed: u64) -> TestbedResult<Vec<Table>> {
    let counts = plan.counts(table.rows.len())?;
    let mut order: Vec<usize> = (0..table.rows.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x7061_7274]));
    let mut at = 0;
    Ok(counts
        .into_iter()
        .map(|c| {
            let t = table.select_rows(&order[at..at + c]);
            at += c;
            t
        })
        .collect())
}

/// Writes `out/client_<i>/data.csv` per client and returns the directories.
pub fn partition_dataset(csv: &Path, plan: &SplitPlan, seed: u64, out: &Path) -> TestbedResult<Vec<PathBuf>> {
    let table = read_table(csv)?;
    write_partitions(&table, plan, seed, out)
}

pub fn write_partitions(table: &Table, plan: &SplitPlan, seed: u64, out: &Path) -> TestbedResult<Vec<PathBuf>> {
    let parts = partition_table(table, plan, seed)?;
    let mut dirs = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        let dir = out.join(crate::sim::client_id(i).to_string());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| TestbedError::io(&dir, e))?;
        }
        write_table(&dir.join(DATA_FILE), part)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn example_counts() {
        assert_eq!(SplitPlan::parse("0.5,0.5").unwrap().counts(10).unwrap(), vec![5, 5]);
        assert_eq!(SplitPlan::uneven_five().counts(579).unwrap(), vec![58, 87, 87, 174, 173]);
        assert!(SplitPlan::parse("0.5,0.6").is_err());
        assert!(SplitPlan::even(3).counts(2).is_err());
    }

    proptest! {
        #[test]
        fn partitions_cover_every_row_once(n in 5usize..200, k in 1usize..5, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let table = Table { header: vec!["v".into()], rows: (0..n).map(|i| vec![i.to_string()]).collect() };
            let parts = partition_table(&table, &SplitPlan::even(k), seed).unwrap();
            let mut all: Vec<usize> = parts.iter().flat_map(|p| p.rows.iter().map(|r| r[0].parse::<usize>().unwrap())).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
