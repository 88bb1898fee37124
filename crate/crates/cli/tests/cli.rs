//! End-to-end checks of the command surface: artifact contracts, exit codes,
//! probe round trips, and sweep aggregation.

use std::path::Path;
use std::process::Command;

use ccl_cli::ablate::{cmd_ablate, Axis};
use ccl_cli::commands::{cmd_probe, cmd_report, cmd_run, cmd_sample};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ccl"))
}

/// A fast two-task synthetic setup.
fn small_config_json(method: &str, seed: u64) -> String {
    format!(
        r#"{{
  "method": "{method}",
  "seed": {seed},
  "lambda1": 0.9,
  "lambda2": 0.1,
  "lambda3": 0.1,
  "t_steps": 2,
  "epochs_per_task": 2,
  "batch_size": 8,
  "queue_capacity": 16,
  "esq_capacity": 8,
  "encoder": {{ "hidden": [16], "embed_dim": 8 }},
  "sampler": {{ "n_per_cluster": 3, "views": 3 }},
  "dataset": {{
    "source": "synthetic",
    "num_classes": 4,
    "per_class": 12,
    "input_dim": 6,
    "class_spread": 3.0,
    "within_spread": 1.0
  }},
  "probe": {{ "epochs": 40 }}
}}"#
    )
}

fn write_config(dir: &Path, method: &str, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("{method}_{seed}.json"));
    std::fs::write(&path, small_config_json(method, seed)).unwrap();
    path
}

#[test]
fn run_writes_all_artifact_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 1);
    let out = dir.path().join("run");
    cmd_run(&config, &out, None).unwrap();

    for artifact in ["report.json", "accuracy.csv", "resolved_config.json", "task1.ckpt", "task2.ckpt"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 2);
    let out1 = dir.path().join("a");
    cmd_run(&config, &out1, None).unwrap();

    let out2 = dir.path().join("b");
    cmd_run(&out1.join("resolved_config.json"), &out2, None).unwrap();

    let a = std::fs::read(out1.join("accuracy.csv")).unwrap();
    let b = std::fs::read(out2.join("accuracy.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_lambda1_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{ "method": "ccl", "seed": 1, "lambda2": 0.1, "lambda3": 0.1 }"#).unwrap();

    let output = bin()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("lambda1"), "stderr should name the field: {stderr}");
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "finetune", 1);
    let a = cmd_run(&config, &dir.path().join("a"), None).unwrap();
    let b = cmd_run(&config, &dir.path().join("b"), Some(99)).unwrap();
    assert_eq!(a.seed, 1);
    assert_eq!(b.seed, 99);
    assert_ne!(a.final_top1, b.final_top1);
}

#[test]
fn probe_reproduces_report_cells_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 3);
    let out = dir.path().join("run");
    let report = cmd_run(&config, &out, None).unwrap();

    for (i, row) in report.accuracy.values.iter().enumerate() {
        let csv = cmd_probe(&out.join(format!("task{}.ckpt", i + 1)), &config, None).unwrap();
        for (j, expected) in row.iter().enumerate() {
            let line = csv
                .lines()
                .find(|l| l.starts_with(&format!("task{},", j + 1)))
                .unwrap_or_else(|| panic!("no probe row for task {}", j + 1));
            let got: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert_eq!(got, *expected, "checkpoint {} task {}", i + 1, j + 1);
        }
    }
}

#[test]
fn probe_rejects_bad_checkpoint_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 4);
    let fake = dir.path().join("fake.ckpt");
    std::fs::write(&fake, b"not a checkpoint").unwrap();

    let output = bin()
        .args(["probe", "--checkpoint"])
        .arg(&fake)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn sample_respects_cluster_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 5);
    let out = dir.path().join("exemplars.csv");
    cmd_sample(&config, &out).unwrap();

    let text = std::fs::read_to_string(&out).unwrap();
    let mut per_task = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let task: usize = line.split(',').next().unwrap().parse().unwrap();
        *per_task.entry(task).or_insert(0usize) += 1;
    }
    // Two classes per task and n_per_cluster 3: at most 6 exemplars per task.
    for (&task, &count) in &per_task {
        assert!(count <= 6, "task {task} stored {count} exemplars");
    }
    assert!(!per_task.is_empty());
}

#[test]
fn report_aggregates_method_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut run_dirs = Vec::new();
    for method in ["finetune", "simple_rehearsal", "ccl"] {
        let config = write_config(dir.path(), method, 6);
        let out = dir.path().join(method);
        cmd_run(&config, &out, None).unwrap();
        run_dirs.push(out);
    }
    let table = dir.path().join("table.csv");
    let dirs: Vec<&Path> = run_dirs.iter().map(|p| p.as_path()).collect();
    cmd_report(&dirs, &table).unwrap();

    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "header plus one row per method: {text}");
    for method in ["finetune", "simple_rehearsal", "ccl"] {
        assert!(lines.iter().any(|l| l.starts_with(&format!("{method},"))), "{text}");
    }
}

#[test]
fn ablate_single_cell_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 7);

    let run_out = dir.path().join("plain");
    let report = cmd_run(&config, &run_out, None).unwrap();

    let sweep_out = dir.path().join("sweep");
    cmd_ablate(&config, &sweep_out, Axis::EsqSize, &[8], &[7], 1).unwrap();

    let summary = std::fs::read_to_string(sweep_out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2, "{summary}");
    let mean_top1: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(mean_top1, report.final_top1);
}

#[test]
fn diverged_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&small_config_json("finetune", 1)).unwrap();
    config["optimizer"] = serde_json::json!({ "learning_rate": 1e12 });
    let path = dir.path().join("explosive.json");
    std::fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();

    let output = bin()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn ablate_components_axis_builds_the_five_rung_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 11);
    let out = dir.path().join("sweep");
    cmd_ablate(&config, &out, Axis::Components, &[], &[11, 12], 2).unwrap();

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 6, "header plus five ladder rows: {summary}");
    let expected = [
        "finetune",
        "random_sampling",
        "variance_sampling",
        "knowledge_distillation",
        "extra_sample_queue",
    ];
    for (line, label) in lines[1..].iter().zip(expected) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1], label);
        assert_eq!(fields[2], "2", "seed count in {line}");
        fields[3].parse::<f64>().unwrap();
        fields[4].parse::<f64>().unwrap();
    }
    // Every cell directory carries full run artifacts.
    assert!(out.join("finetune").join("seed_11").join("report.json").exists());
    assert!(out.join("extra_sample_queue").join("seed_12").join("task2.ckpt").exists());
}

#[test]
fn ablate_kmeans_axis_sweeps_cluster_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 13);
    let out = dir.path().join("sweep");
    cmd_ablate(&config, &out, Axis::KmeansK, &[1, 2], &[13], 1).unwrap();
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");
    assert!(summary.contains("k_1,"));
    assert!(summary.contains("k_2,"));
}

#[test]
fn ablate_unknown_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 8);
    let output = bin()
        .args(["ablate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(["--axis", "nonsense"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn ablate_esq_axis_produces_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ccl", 9);
    let out = dir.path().join("sweep");
    cmd_ablate(&config, &out, Axis::EsqSize, &[4, 8, 16], &[9, 10], 2).unwrap();

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 4, "{summary}");
    for size in [4, 8, 16] {
        let row = lines.iter().find(|l| l.contains(&format!("esq_{size},"))).unwrap();
        let n: usize = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(n, 2);
    }
}
