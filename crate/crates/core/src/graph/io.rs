//! Plain-text dataset files.
//!
//! * edges: `src<TAB>dst` per line, 0-based ids, `#` lines are comments
//! * labels: `node<TAB>label`, label `-1` means unlabeled
//! * features: CSV, row `i` holds the features of node `i`
//! * splits: `node<TAB>train|val|test`

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{LabeledGraph, Masks};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPLITS_FILE: &str = "splits.tsv";

/// Paths of one dataset on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub splits: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard file names inside `dir`; the splits file is used only if present.
    pub fn in_dir(dir: &Path) -> Self {
        let splits = dir.join(SPLITS_FILE);
        Self {
            edges: dir.join(EDGES_FILE),
            features: dir.join(FEATURES_FILE),
            labels: dir.join(LABELS_FILE),
            splits: splits.exists().then_some(splits),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn two_fields<'a>(path: &Path, line: usize, text: &'a str) -> Result<(&'a str, &'a str)> {
    let mut it = text.split(|c: char| c == '\t' || c.is_whitespace()).filter(|s| !s.is_empty());
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((a, b)),
        _ => Err(parse_err(path, line, "expected two fields")),
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {s:?}")))
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    data_lines(path)?
        .into_iter()
        .map(|(ln, text)| {
            let (a, b) = two_fields(path, ln, &text)?;
            Ok((parse_num(path, ln, a)?, parse_num(path, ln, b)?))
        })
        .collect()
}

/// `(node, label)` pairs; `None` for label -1.
pub fn read_labels(path: &Path) -> Result<Vec<(usize, Option<usize>)>> {
    data_lines(path)?
        .into_iter()
        .map(|(ln, text)| {
            let (a, b) = two_fields(path, ln, &text)?;
            let node = parse_num(path, ln, a)?;
            let label: i64 = parse_num(path, ln, b)?;
            match label {
                -1 => Ok((node, None)),
                l if l >= 0 => Ok((node, Some(l as usize))),
                _ => Err(parse_err(path, ln, format!("invalid label {label}"))),
            }
        })
        .collect()
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (ln, text) in data_lines(path)? {
        let row: Result<Vec<f64>> = text
            .split(',')
            .map(|s| parse_num(path, ln, s.trim()))
            .collect();
        rows.push(row?);
    }
    Matrix::from_rows(&rows).map_err(|_| parse_err(path, 0, "rows have differing lengths"))
}

pub fn read_splits(path: &Path) -> Result<Vec<(usize, SplitKind)>> {
    data_lines(path)?
        .into_iter()
        .map(|(ln, text)| {
            let (a, b) = two_fields(path, ln, &text)?;
            let kind = match b {
                "train" => SplitKind::Train,
                "val" => SplitKind::Val,
                "test" => SplitKind::Test,
                other => return Err(parse_err(path, ln, format!("unknown split {other:?}"))),
            };
            Ok((parse_num(path, ln, a)?, kind))
        })
        .collect()
}

/// Per-node labels for `n` nodes; nodes absent from the file are unlabeled.
pub fn labels_vector(pairs: &[(usize, Option<usize>)], n: usize) -> Result<Vec<Option<usize>>> {
    let mut labels = vec![None; n];
    for &(node, l) in pairs {
        if node >= n {
            return Err(Error::IndexOutOfRange {
                what: "label node",
                index: node,
                bound: n,
            });
        }
        labels[node] = l;
    }
    Ok(labels)
}

pub fn masks_from_splits(pairs: &[(usize, SplitKind)], n: usize) -> Result<Masks> {
    let mut m = Masks::empty(n);
    for &(node, kind) in pairs {
        if node >= n {
            return Err(Error::IndexOutOfRange {
                what: "split node",
                index: node,
                bound: n,
            });
        }
        match kind {
            SplitKind::Train => m.train[node] = true,
            SplitKind::Val => m.val[node] = true,
            SplitKind::Test => m.test[node] = true,
        }
    }
    Ok(m)
}

pub fn load_dataset(paths: &DatasetPaths) -> Result<LabeledGraph> {
    let features = read_features(&paths.features)?;
    let n = features.rows();
    let edges = read_edges(&paths.edges)?;
    let labels = labels_vector(&read_labels(&paths.labels)?, n)?;
    let g = LabeledGraph::build(&edges, features, Some(labels))?;
    match &paths.splits {
        Some(p) => g.with_masks(masks_from_splits(&read_splits(p)?, n)?),
        None => Ok(g),
    }
}

pub fn write_edges(path: &Path, g: &LabeledGraph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &(a, b) in g.edges() {
        writeln!(w, "{a}\t{b}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, g: &LabeledGraph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, l) in g.labels().iter().enumerate() {
        match l {
            Some(c) => writeln!(w, "{i}\t{c}")?,
            None => writeln!(w, "{i}\t-1")?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_features(path: &Path, g: &LabeledGraph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let x = g.features();
    for r in 0..x.rows() {
        let line: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_splits(path: &Path, masks: &Masks) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..masks.train.len() {
        let kind = if masks.train[i] {
            "train"
        } else if masks.val[i] {
            "val"
        } else if masks.test[i] {
            "test"
        } else {
            continue;
        };
        writeln!(w, "{i}\t{kind}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the standard files into `dir`.
pub fn write_dataset(dir: &Path, g: &LabeledGraph) -> Result<DatasetPaths> {
    std::fs::create_dir_all(dir)?;
    write_edges(&dir.join(EDGES_FILE), g)?;
    write_features(&dir.join(FEATURES_FILE), g)?;
    write_labels(&dir.join(LABELS_FILE), g)?;
    if let Some(m) = g.masks() {
        write_splits(&dir.join(SPLITS_FILE), m)?;
    }
    Ok(DatasetPaths::in_dir(dir))
}
