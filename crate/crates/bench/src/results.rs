//! Result rows and their seed-averaged summaries, both as CSV.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::BenchResult;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task_id: String,
    /// `tif`, `baseline_prototype` or `baseline_linear`.
    pub method: String,
    /// Weight scheme for `tif` rows, empty for baselines.
    pub scheme: String,
    pub rank: Option<usize>,
    pub subset: String,
    pub k: usize,
    pub n: usize,
    pub rho: f64,
    pub test_mode: String,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub scheme: String,
    pub rank: Option<usize>,
    pub subset: String,
    pub k: usize,
    pub n: usize,
    pub rho: f64,
    pub test_mode: String,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_stderr: f64,
    pub macro_f1_mean: f64,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> BenchResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> BenchResult<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups rows that differ only in seed and task id.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = format!(
            "{}|{}|{:?}|{}|{}|{}|{}|{}",
            r.method, r.scheme, r.rank, r.subset, r.k, r.n, r.rho, r.test_mode
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let acc: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
            let f1: Vec<f64> = g.iter().map(|r| r.macro_f1).collect();
            let (accuracy_mean, accuracy_stderr) = mean_stderr(&acc);
            let first = g[0];
            SummaryRow {
                method: first.method.clone(),
                scheme: first.scheme.clone(),
                rank: first.rank,
                subset: first.subset.clone(),
                k: first.k,
                n: first.n,
                rho: first.rho,
                test_mode: first.test_mode.clone(),
                seeds: g.len(),
                accuracy_mean,
                accuracy_stderr,
                macro_f1_mean: mean_stderr(&f1).0,
            }
        })
        .collect()
}
