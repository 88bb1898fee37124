//! Component and hyperparameter sweeps.
//!
//! The `components` axis replays the ablation ladder: start from plain
//! finetuning and add one mechanism at a time (random rehearsal, variance
//! rehearsal, distillation, extra sample queue) until the full method is
//! assembled. The other axes sweep the extra-queue capacity and the k-means
//! cluster count. Each (value, seed) cell is an independent full run in its
//! own subdirectory; a summary CSV aggregates seed means afterwards.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ccl_core::config::{Method, RunConfig};
use ccl_core::experiment::{run_experiment, RunReport};
use ccl_core::{CclError, Result};

use crate::artifacts::{accuracy_csv, mean, stdev, write_json};

/// Sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Components,
    EsqSize,
    KmeansK,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "esq_size" => Ok(Self::EsqSize),
            "kmeans_k" => Ok(Self::KmeansK),
            other => Err(CclError::Config(format!(
                "unknown axis \"{other}\" (expected components, esq_size, or kmeans_k)"
            ))),
        }
    }
}

/// The ablation ladder, in order: each row is the previous plus one
/// component. The last row is the full method.
pub fn component_ladder(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut finetune = base.clone();
    finetune.method = Method::Finetune;

    let mut random = base.clone();
    random.method = Method::SimpleRehearsal;

    let mut variance = base.clone();
    variance.method = Method::Ccl;
    variance.lambda2 = 0.0;
    variance.lambda3 = 0.0;

    let mut kd = base.clone();
    kd.method = Method::Ccl;
    kd.lambda2 = 0.0;

    let mut full = base.clone();
    full.method = Method::Ccl;

    vec![
        ("finetune".into(), finetune),
        ("random_sampling".into(), random),
        ("variance_sampling".into(), variance),
        ("knowledge_distillation".into(), kd),
        ("extra_sample_queue".into(), full),
    ]
}

/// One sweep cell: a labelled config to run under one seed.
struct Cell {
    label: String,
    config: RunConfig,
    dir: PathBuf,
}

fn cells_for(axis: Axis, base: &RunConfig, values: &[u64], seeds: &[u64], out_dir: &Path) -> Result<Vec<Cell>> {
    let mut variants: Vec<(String, RunConfig)> = match axis {
        Axis::Components => component_ladder(base),
        Axis::EsqSize => {
            let sizes: Vec<u64> = if values.is_empty() { vec![32, 64, 128, 256, 512] } else { values.to_vec() };
            sizes
                .iter()
                .map(|&size| {
                    let mut cfg = base.clone();
                    cfg.esq_capacity = size as usize;
                    (format!("esq_{size}"), cfg)
                })
                .collect()
        }
        Axis::KmeansK => {
            let ks: Vec<u64> = if values.is_empty() { vec![1, 2, 4, 8] } else { values.to_vec() };
            ks.iter()
                .map(|&k| {
                    let mut cfg = base.clone();
                    cfg.sampler.kmeans_k = Some(k as usize);
                    (format!("k_{k}"), cfg)
                })
                .collect()
        }
    };
    if axis == Axis::Components && !values.is_empty() {
        return Err(CclError::Config("the components axis takes no values".into()));
    }

    let mut cells = Vec::new();
    for (label, cfg) in variants.drain(..) {
        for &seed in seeds {
            let mut config = cfg.clone();
            config.seed = seed;
            config.clone().resolve()?;
            cells.push(Cell {
                label: label.clone(),
                dir: out_dir.join(&label).join(format!("seed_{seed}")),
                config,
            });
        }
    }
    Ok(cells)
}

/// Runs the sweep, `jobs` cells at a time, and writes `summary.csv` with one
/// row per ladder rung / value: seed count, mean and stdev of final top-1,
/// and mean forgetting.
pub fn cmd_ablate(
    config_path: &Path,
    out_dir: &Path,
    axis: Axis,
    values: &[u64],
    seeds: &[u64],
    jobs: usize,
) -> Result<()> {
    let base = crate::commands::load_config(config_path, None)?;
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let cells = cells_for(axis, &base, values, &seeds, out_dir)?;
    fs::create_dir_all(out_dir)?;

    let results: Mutex<Vec<(String, RunReport)>> = Mutex::new(Vec::new());
    let errors: Mutex<Vec<CclError>> = Mutex::new(Vec::new());
    let next: Mutex<usize> = Mutex::new(0);
    let jobs = jobs.max(1);

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len().max(1)) {
            scope.spawn(|| loop {
                let index = {
                    let mut cursor = next.lock().unwrap();
                    let i = *cursor;
                    *cursor += 1;
                    i
                };
                let Some(cell) = cells.get(index) else { break };
                match run_cell(cell) {
                    Ok(report) => results.lock().unwrap().push((cell.label.clone(), report)),
                    Err(e) => errors.lock().unwrap().push(e),
                }
            });
        }
    });

    if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }
    let results = results.into_inner().unwrap();

    // One summary row per label, in ladder/value order.
    let mut labels: Vec<String> = Vec::new();
    for cell in &cells {
        if !labels.contains(&cell.label) {
            labels.push(cell.label.clone());
        }
    }
    let mut csv = String::from("axis,value,n_seeds,mean_top1,stdev_top1,mean_forgetting,stdev_forgetting\n");
    let axis_name = match axis {
        Axis::Components => "components",
        Axis::EsqSize => "esq_size",
        Axis::KmeansK => "kmeans_k",
    };
    for label in &labels {
        let group: Vec<&RunReport> =
            results.iter().filter(|(l, _)| l == label).map(|(_, r)| r).collect();
        let tops: Vec<f64> = group.iter().map(|r| r.final_top1).collect();
        let forgets: Vec<f64> = group.iter().filter_map(|r| r.forgetting).collect();
        let (fm, fs) = if forgets.is_empty() {
            (String::new(), String::new())
        } else {
            (format!("{}", mean(&forgets)), format!("{}", stdev(&forgets)))
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            axis_name,
            label,
            group.len(),
            mean(&tops),
            stdev(&tops),
            fm,
            fs,
        );
    }
    fs::write(out_dir.join("summary.csv"), csv)?;
    Ok(())
}

fn run_cell(cell: &Cell) -> Result<RunReport> {
    fs::create_dir_all(&cell.dir)?;
    let config = cell.config.clone().resolve()?;
    write_json(&config, &cell.dir.join("resolved_config.json"))?;
    let report = run_experiment(&config, Some(&cell.dir))?;
    write_json(&report, &cell.dir.join("report.json"))?;
    fs::write(cell.dir.join("accuracy.csv"), accuracy_csv(&report))?;
    Ok(report)
}
