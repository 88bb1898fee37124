//! Run-directory artifact writers: reports, accuracy tables, summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ccl_core::config::RunConfig;
use ccl_core::experiment::RunReport;
use ccl_core::rehearsal::ExemplarStore;
use ccl_core::{CclError, Result};

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CclError::Config(format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CclError::Config(e.to_string()))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CclError::Config(e.to_string()))
}

/// Flat per-cell accuracy table: `method,seed,task_i,task_j,accuracy` with
/// 1-based task ids, matching `task{i}.ckpt` names.
pub fn accuracy_csv(report: &RunReport) -> String {
    let mut out = String::from("method,seed,task_i,task_j,accuracy\n");
    for (i, row) in report.accuracy.values.iter().enumerate() {
        for (j, acc) in row.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                report.method.as_str(),
                report.seed,
                i + 1,
                j + 1,
                acc
            );
        }
    }
    out
}

/// Exemplar dump: `task_id,sample_index,cluster_id,variance_score`, 1-based
/// task ids; the random sampler leaves the last two columns empty.
pub fn exemplar_csv(store: &ExemplarStore) -> String {
    let mut out = String::from("task_id,sample_index,cluster_id,variance_score\n");
    for e in store.entries() {
        let cluster = e.cluster_id.map_or(String::new(), |c| c.to_string());
        let variance = e.variance_score.map_or(String::new(), |v| format!("{v}"));
        let _ = writeln!(out, "{},{},{},{}", e.task_id + 1, e.sample_index, cluster, variance);
    }
    out
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn stdev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
