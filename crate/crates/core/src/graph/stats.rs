use super::LabeledGraph;
use crate::error::{Error, Result};

/// Per-class counts sorted in descending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassHistogram {
    counts: Vec<usize>,
    classes: Vec<usize>,
    absent: Vec<usize>,
    total: usize,
}

impl ClassHistogram {
    /// Builds from per-class counts indexed by class id. Zero-count classes
    /// are dropped and listed in [`ClassHistogram::absent`].
    pub fn from_counts(per_class: &[usize]) -> Result<Self> {
        let mut present: Vec<(usize, usize)> = per_class
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(k, &c)| (k, c))
            .collect();
        if present.is_empty() {
            return Err(Error::NoLabeledNodes);
        }
        // Larger counts first; equal counts keep class order.
        present.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let absent = per_class
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c == 0)
            .map(|(k, _)| k)
            .collect();
        Ok(Self {
            total: present.iter().map(|&(_, c)| c).sum(),
            counts: present.iter().map(|&(_, c)| c).collect(),
            classes: present.iter().map(|&(k, _)| k).collect(),
            absent,
        })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Class id for each entry of [`ClassHistogram::counts`].
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn absent(&self) -> &[usize] {
        &self.absent
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

/// Counts labeled nodes per class, optionally restricted to `mask`.
pub fn class_histogram(g: &LabeledGraph, mask: Option<&[bool]>) -> Result<ClassHistogram> {
    let mut per_class = vec![0usize; g.num_classes()];
    for (i, l) in g.labels().iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if let Some(c) = *l {
            per_class[c] += 1;
        }
    }
    ClassHistogram::from_counts(&per_class)
}

/// Smallest class count over the largest.
pub fn imbalance_ratio(h: &ClassHistogram) -> f64 {
    let max = h.counts[0] as f64;
    let min = *h.counts.last().unwrap() as f64;
    min / max
}

/// `Q(p)`: the smallest number of classes (largest first) whose cumulative
/// share of instances reaches `p`.
pub fn head_quantile(h: &ClassHistogram, p: f64) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile order must lie in (0, 1), got {p}")));
    }
    let total = h.total as f64;
    let mut cum = 0usize;
    for (rank, &c) in h.counts.iter().enumerate() {
        cum += c;
        if cum as f64 / total >= p {
            return Ok(rank + 1);
        }
    }
    Ok(h.counts.len())
}

/// `Q(p) / (T - Q(p))`; see [`head_quantile`].
pub fn long_tailedness_ratio(h: &ClassHistogram, p: f64) -> Result<f64> {
    let t = h.counts.len();
    let q = head_quantile(h, p)?;
    if q >= t {
        return Err(Error::DegenerateQuantile(t));
    }
    Ok(q as f64 / (t - q) as f64)
}
