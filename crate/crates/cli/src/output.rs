//! CSV and TSV writers. Every CSV starts with a header row; floats use the
//! shortest representation that round-trips.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use tail2learn::eval::{BoundLedger, Metrics};
use tail2learn::training::EpochLog;

use crate::error::Result;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const METRIC_NAMES: [&str; 4] = ["bacc", "macro_f1", "g_means", "acc"];

pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metric_values(m: &Metrics) -> [f64; 4] {
    [m.bacc, m.macro_f1, m.g_means, m.acc]
}

fn metric_cells(m: Option<&Metrics>) -> Vec<String> {
    match m {
        Some(m) => metric_values(m).iter().map(f64::to_string).collect(),
        None => vec![String::new(); 4],
    }
}

pub fn log_header(num_classes: usize) -> Vec<String> {
    let mut h = strings(&["epoch", "l_nc", "l_bcl", "l_scl", "l_total", "loss_range"]);
    h.extend((0..num_classes).map(|c| format!("ce_class_{c}")));
    for s in SPLITS {
        h.extend(METRIC_NAMES.iter().map(|m| format!("{s}_{m}")));
    }
    h.push("wall_ms".into());
    h
}

/// One row per epoch; `wall_ms` is the last column.
pub fn write_log(path: &Path, logs: &[EpochLog], num_classes: usize) -> Result<()> {
    let rows: Vec<Vec<String>> = logs
        .iter()
        .map(|l| {
            let r = &l.report;
            let mut row = vec![
                l.epoch.to_string(),
                r.nc.to_string(),
                r.bcl.to_string(),
                r.scl.to_string(),
                r.total.to_string(),
                r.loss_range().to_string(),
            ];
            row.extend(r.per_class_ce.iter().map(f64::to_string));
            for m in [&l.train, &l.val, &l.test] {
                row.extend(metric_cells(m.as_ref()));
            }
            row.push(format!("{:.3}", l.wall_ms));
            row
        })
        .collect();
    write_rows(path, &log_header(num_classes), &rows)
}

pub fn write_metrics(path: &Path, rows: &[(&str, Option<&Metrics>)]) -> Result<()> {
    let mut header = strings(&["split"]);
    header.extend(strings(&METRIC_NAMES));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(s, m)| {
            let mut r = vec![s.to_string()];
            r.extend(metric_cells(*m));
            r
        })
        .collect();
    write_rows(path, &header, &body)
}

/// `class, train_count, test_count, recall` (recall empty when absent).
pub fn write_per_class(path: &Path, train: &[usize], test: &[usize], recall: &[Option<f64>]) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..train.len())
        .map(|c| vec![c.to_string(), train[c].to_string(), test[c].to_string(), opt(recall[c])])
        .collect();
    write_rows(path, &strings(&["class", "train_count", "test_count", "recall"]), &rows)
}

/// Long format `record, layer, index, value`.
pub fn write_bound_ledger(path: &Path, ledger: &BoundLedger) -> Result<()> {
    let mut rows = Vec::new();
    let cell = |r: &str, l: String, i: String, v: String| vec![r.to_string(), l, i, v];
    for (l, sizes) in ledger.task_sizes.iter().enumerate() {
        for (t, n) in sizes.iter().enumerate() {
            rows.push(cell("task_size", l.to_string(), t.to_string(), n.to_string()));
        }
        rows.push(cell("inverse_size_sum", l.to_string(), String::new(), ledger.inverse_sums[l].to_string()));
    }
    for (c, v) in ledger.per_class_train_loss.iter().enumerate() {
        rows.push(cell("class_train_loss", String::new(), c.to_string(), v.to_string()));
    }
    rows.push(cell("loss_range", String::new(), String::new(), ledger.loss_range.to_string()));
    rows.push(cell("train_loss", String::new(), String::new(), ledger.train_loss.to_string()));
    rows.push(cell("val_loss", String::new(), String::new(), opt(ledger.val_loss)));
    rows.push(cell("empirical_gap_val_proxy", String::new(), String::new(), opt(ledger.empirical_gap)));
    write_rows(path, &strings(&["record", "layer", "index", "value"]), &rows)
}

pub fn write_predictions(path: &Path, predicted: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, p) in predicted.iter().enumerate() {
        writeln!(w, "{i}\t{p}")?;
    }
    w.flush()?;
    Ok(())
}
