//! The run / probe / sample / report commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ccl_core::config::RunConfig;
use ccl_core::encoder::load_checkpoint;
use ccl_core::evaluation::{linear_probe, pooled_splits, split_train_test};
use ccl_core::experiment::{
    build_dataset, build_stream, effective_probe_config, run_experiment, run_training, RunReport,
};
use ccl_core::rng::derive_seed;
use ccl_core::{CclError, Result};

use crate::artifacts::{
    accuracy_csv, exemplar_csv, mean, read_config, read_report, stdev, write_json,
};

/// Loads a config file and applies an optional seed override.
pub fn load_config(config_path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut config = read_config(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

/// Full experiment run: writes `resolved_config.json`, per-task checkpoints,
/// `report.json`, and `accuracy.csv` into `out_dir`.
pub fn cmd_run(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<RunReport> {
    let config = load_config(config_path, seed_override)?.resolve()?;
    fs::create_dir_all(out_dir)?;
    write_json(&config, &out_dir.join("resolved_config.json"))?;

    let report = run_experiment(&config, Some(out_dir))?;
    write_json(&report, &out_dir.join("report.json"))?;
    fs::write(out_dir.join("accuracy.csv"), accuracy_csv(&report))?;
    Ok(report)
}

/// Re-evaluates a checkpoint against the config's task stream: one probe per
/// task plus the pooled all-classes probe. Returns CSV text and writes it to
/// `out` when given.
pub fn cmd_probe(checkpoint_path: &Path, config_path: &Path, out: Option<&Path>) -> Result<String> {
    let config = load_config(config_path, None)?.resolve()?;
    let params = load_checkpoint(checkpoint_path)?;

    let dataset = build_dataset(&config)?;
    let expected_dim = dataset.dim();
    if params.arch.input_dim() != expected_dim {
        return Err(CclError::Checkpoint(format!(
            "architecture input dim {} does not match dataset dim {expected_dim}",
            params.arch.input_dim()
        )));
    }
    let stream = build_stream(&config, &dataset)?;
    let probe = effective_probe_config(&config);

    let mut csv = String::from("target,top1\n");
    for j in 0..stream.num_tasks() {
        let (train, test) = split_train_test(
            &stream.tasks[j],
            probe.split_fraction,
            derive_seed(probe.seed, "task_split", &[j as u64]),
        );
        let top1 = linear_probe(&params, &train, &test, &probe)?;
        let _ = writeln!(csv, "task{},{}", j + 1, top1);
    }
    let (pooled_train, pooled_test) = pooled_splits(&stream, &probe);
    let top1 = linear_probe(&params, &pooled_train, &pooled_test, &probe)?;
    let _ = writeln!(csv, "pooled,{top1}");

    if let Some(path) = out {
        fs::write(path, &csv)?;
    }
    Ok(csv)
}

/// Trains per the config and dumps every stored exemplar as CSV.
pub fn cmd_sample(config_path: &Path, out: &Path) -> Result<()> {
    let config = load_config(config_path, None)?.resolve()?;
    let (_, state, _) = run_training(&config, None)?;
    fs::write(out, exemplar_csv(&state.exemplars))?;
    Ok(())
}

/// Aggregates run directories into one comparison table grouped by
/// `(method, t_steps)`: mean and stdev of the final pooled top-1 plus mean
/// forgetting and forward transfer.
pub fn cmd_report(run_dirs: &[&Path], out: &Path) -> Result<()> {
    let mut reports = Vec::new();
    for dir in run_dirs {
        reports.push(read_report(&dir.join("report.json"))?);
    }

    let mut groups: Vec<(String, usize, Vec<&RunReport>)> = Vec::new();
    for report in &reports {
        let key = (report.method.as_str().to_string(), report.config.t_steps);
        match groups.iter_mut().find(|(m, t, _)| *m == key.0 && *t == key.1) {
            Some((_, _, list)) => list.push(report),
            None => groups.push((key.0, key.1, vec![report])),
        }
    }

    let mut csv = String::from(
        "method,t_steps,n_runs,mean_top1,stdev_top1,mean_forgetting,mean_forward_transfer\n",
    );
    for (method, t_steps, list) in &groups {
        let tops: Vec<f64> = list.iter().map(|r| r.final_top1).collect();
        let forgets: Vec<f64> = list.iter().filter_map(|r| r.forgetting).collect();
        let transfers: Vec<f64> = list.iter().filter_map(|r| r.forward_transfer).collect();
        let fmt_opt = |v: &[f64]| if v.is_empty() { String::new() } else { format!("{}", mean(v)) };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            method,
            t_steps,
            list.len(),
            mean(&tops),
            stdev(&tops),
            fmt_opt(&forgets),
            fmt_opt(&transfers),
        );
    }
    fs::write(out, csv)?;
    Ok(())
}
