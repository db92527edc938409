use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tail2learn::graph::io::write_dataset;
use tail2learn::{LabeledGraph, Matrix};

fn t2l(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2l")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let out = dir.join("runs");
    let body = format!(
        r#"{{"sizes":[24,12,6,6],"max_epochs":15,"patience":15,"hidden":8,"out":{:?}{extra}}}"#,
        out.to_str().unwrap()
    );
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn stats_on_known_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let counts = [8, 4, 2, 1, 1];
    let labels: Vec<Option<usize>> = counts.iter().enumerate().flat_map(|(c, &n)| vec![Some(c); n]).collect();
    let n = labels.len();
    let g = LabeledGraph::build(&[(0, 1)], Matrix::zeros(n, 2), Some(labels)).unwrap();
    write_dataset(dir.path(), &g).unwrap();
    let csv = dir.path().join("stats.csv");
    let o = t2l(&["stats", "--data", dir.path().to_str().unwrap(), "--p", "0.8", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("[all] ratio_lt(0.8) 1.5"), "{s}");
    assert!(s.contains("[all] imbalance_ratio 0.125"), "{s}");
    let rows = csv_rows(&csv);
    assert_eq!(rows[0], ["scope", "stat", "key", "value"]);
    assert!(rows.iter().any(|r| r[1] == "ratio_lt" && r[3] == "1.5"));
}

#[test]
fn gen_then_stats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("data");
    let o = t2l(&["gen", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = t2l(&["stats", "--data", data.to_str().unwrap()]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("[all] histogram 0:24 1:12 2:6 3:6"), "{s}");
    assert!(s.contains("[train]"));
}

#[test]
fn train_writes_run_directory_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = t2l(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].as_ref().unwrap().path();
    for f in ["config.json", "log.csv", "metrics.csv", "per_class.csv", "bound_ledger.csv", "model.ckpt", "predictions.tsv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = csv_rows(&run.join("log.csv"));
    assert_eq!(log.len(), 16);
    assert_eq!(log[0].last().unwrap(), "wall_ms");
    let metrics = csv_rows(&run.join("metrics.csv"));
    assert_eq!(metrics.len(), 4);
    let ledger = fs::read_to_string(run.join("bound_ledger.csv")).unwrap();
    for record in ["task_size", "inverse_size_sum", "loss_range", "empirical_gap_val_proxy"] {
        assert!(ledger.contains(record), "ledger lacks {record}");
    }
    assert_eq!(fs::read_to_string(run.join("predictions.tsv")).unwrap().lines().count(), 48);

    let again = t2l(&["train", "--config", &cfg]);
    assert_eq!(again.status.code(), Some(1));
    assert!(t2l(&["train", "--config", &cfg, "--force"]).status.success());

    let ev = t2l(&["eval", "--config", &cfg, "--checkpoint", run.join("model.ckpt").to_str().unwrap()]);
    assert!(ev.status.success());
    assert!(stdout(&ev).contains("test  bacc="));
}

#[test]
fn baselines_get_their_own_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for b in ["origin", "reweight", "oversample"] {
        let o = t2l(&["train", "--config", &cfg, "--baseline", b]);
        assert!(o.status.success(), "{b}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 3);
    assert_eq!(t2l(&["train", "--config", &cfg, "--baseline", "smote"]).status.code(), Some(2));
}

#[test]
fn bad_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#","gama":0.1"#);
    let o = t2l(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gama"));
    let cfg = write_config(dir.path(), r#","tau":0.0"#);
    assert_eq!(t2l(&["train", "--config", &cfg]).status.code(), Some(1));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = t2l(&["sweep", "--config", &cfg, "--gamma", "0.01", "--gamma", "0.1", "--tau", "0.01", "--tau", "0.1", "--tau", "1.0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("runs/sweep.csv"));
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0][..2], ["gamma", "tau"]);
    assert!(stdout(&o).contains("bacc spread"));
}

#[test]
fn ablate_and_bench_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = t2l(&["ablate", "--config", &cfg, "--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("runs/ablation.csv"));
    assert_eq!(rows[0], ["variant", "m1", "m2", "l_ce", "bacc", "macro_f1", "g_means", "acc"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(csv_rows(&dir.path().join("runs/ablation_seeds.csv")).len(), 7);

    let o = t2l(&["bench", "--config", &cfg, "--sizes", "1000", "--epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("runs/bench.csv"));
    assert_eq!(rows.len(), 3);
    assert!(stdout(&o).contains("slope n/a"));
}
