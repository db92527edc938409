//! Long-tail metrics and the computable terms of the task-grouping bound.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::LabeledGraph;
use crate::losses::{layer_assignments, LossReport, TaskAssignment};
use crate::model::ForwardTrace;

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let t = rows.len();
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self {
            num_classes: t,
            counts: rows.concat(),
        })
    }

    /// Counts the rows with `mask` set and a label.
    pub fn from_predictions(
        labels: &[Option<usize>],
        predicted: &[usize],
        mask: Option<&[bool]>,
        num_classes: usize,
    ) -> Result<Self> {
        if predicted.len() < labels.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion matrix",
                left: (labels.len(), 1),
                right: (predicted.len(), 1),
            });
        }
        let mut cm = Self::new(num_classes);
        for (i, l) in labels.iter().enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            if let Some(c) = *l {
                cm.add(c, predicted[i])?;
            }
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let t = self.num_classes;
        if truth >= t || predicted >= t {
            return Err(Error::IndexOutOfRange {
                what: "confusion class",
                index: truth.max(predicted),
                bound: t,
            });
        }
        self.counts[truth * t + predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Relabels class `c` as `perm[c]` on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.num_classes);
        for t in 0..self.num_classes {
            for p in 0..self.num_classes {
                out.counts[perm[t] * self.num_classes + perm[p]] = self.get(t, p);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub bacc: f64,
    pub macro_f1: f64,
    pub g_means: f64,
    /// Classes with no true row, left out of every average.
    pub absent: Vec<usize>,
}

/// Recall per class; `None` for classes with no true row.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.num_classes())
        .map(|c| {
            let n = cm.row_sum(c);
            (n > 0).then(|| cm.get(c, c) as f64 / n as f64)
        })
        .collect()
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let trace: u64 = (0..cm.num_classes()).map(|c| cm.get(c, c)).sum();
    let recalls = per_class_accuracy(cm);
    let present: Vec<usize> = (0..cm.num_classes()).filter(|&c| recalls[c].is_some()).collect();
    let absent = (0..cm.num_classes()).filter(|&c| recalls[c].is_none()).collect();
    let k = present.len() as f64;

    let equal_rows = present.windows(2).all(|w| cm.row_sum(w[0]) == cm.row_sum(w[1]));
    let bacc = if equal_rows {
        // common denominator: exact integer ratio
        trace as f64 / total as f64
    } else {
        present.iter().map(|&c| recalls[c].unwrap()).sum::<f64>() / k
    };
    let macro_f1 = present
        .iter()
        .map(|&c| {
            let tp = cm.get(c, c) as f64;
            let denom = cm.row_sum(c) as f64 + cm.col_sum(c) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum::<f64>()
        / k;
    let g_means = if present.iter().any(|&c| recalls[c] == Some(0.0)) {
        0.0
    } else {
        let mean_log = present.iter().map(|&c| recalls[c].unwrap().ln()).sum::<f64>() / k;
        // rounding guard for the AM-GM bound
        mean_log.exp().min(bacc)
    };
    Ok(Metrics {
        acc: trace as f64 / total as f64,
        bacc,
        macro_f1,
        g_means,
        absent,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundLedger {
    /// `n_t` per grouping layer, counted over original nodes.
    pub task_sizes: Vec<Vec<usize>>,
    /// Sum of `1 / n_t` over the non-empty tasks of each layer.
    pub inverse_sums: Vec<f64>,
    pub per_class_train_loss: Vec<f64>,
    pub loss_range: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Validation minus training loss, a stand-in for the population gap.
    pub empirical_gap: Option<f64>,
}

fn inverse_sum(sizes: &[usize]) -> f64 {
    sizes.iter().filter(|&&s| s > 0).map(|&s| 1.0 / s as f64).sum()
}

/// Assignments of every layer composed down to the original nodes.
pub fn composed_task_sizes(assignments: &[TaskAssignment]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(assignments.len());
    let mut current: Option<TaskAssignment> = None;
    for a in assignments {
        let next = match &current {
            None => a.clone(),
            Some(c) => c.then(a)?,
        };
        out.push(next.sizes());
        current = Some(next);
    }
    Ok(out)
}

/// Fills the ledger from an eval-mode trace and its loss report.
pub fn bound_ledger(tape: &Tape, trace: &ForwardTrace, report: &LossReport, g: &LabeledGraph) -> Result<BoundLedger> {
    if report.per_class_ce.len() != g.num_classes() {
        return Err(Error::invalid(format!(
            "need {} per-class losses, got {}",
            g.num_classes(),
            report.per_class_ce.len()
        )));
    }
    let masks = g.masks().ok_or(Error::NoLabeledNodes)?;
    let train_labels = g.train_labels();
    let assignments = layer_assignments(tape, trace, &train_labels, g.num_classes())?;
    let task_sizes = composed_task_sizes(&assignments)?;
    let inverse_sums = task_sizes.iter().map(|s| inverse_sum(s)).collect();

    let logits = tape.value(trace.logits);
    let mean_ce = |mask: &[bool]| -> Option<f64> {
        let per = crate::losses::per_class_cross_entropy(logits, g.labels(), mask, g.num_classes());
        let mut counts = vec![0usize; g.num_classes()];
        for (l, &m) in g.labels().iter().zip(mask) {
            if let (Some(c), true) = (l, m) {
                counts[*c] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        (n > 0).then(|| {
            per.iter()
                .zip(&counts)
                .filter_map(|(v, &k)| v.map(|v| v * k as f64))
                .sum::<f64>()
                / n as f64
        })
    };
    let train_loss = mean_ce(&masks.train).ok_or(Error::NoLabeledNodes)?;
    let val_loss = mean_ce(&masks.val);
    Ok(BoundLedger {
        task_sizes,
        inverse_sums,
        per_class_train_loss: report.per_class_ce.clone(),
        loss_range: report.loss_range(),
        train_loss,
        val_loss,
        empirical_gap: val_loss.map(|v| v - train_loss),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorollaryCheck {
    pub before: f64,
    pub after: f64,
    pub holds: bool,
}

/// Compares `sum 1/n_t` before and after merging task `t` into group
/// `merge_map[t]`.
pub fn corollary_check(counts: &[usize], merge_map: &[usize]) -> Result<CorollaryCheck> {
    if counts.is_empty() {
        return Err(Error::Empty("partition"));
    }
    if merge_map.len() != counts.len() {
        return Err(Error::ShapeMismatch {
            op: "corollary_check",
            left: (counts.len(), 1),
            right: (merge_map.len(), 1),
        });
    }
    if counts.contains(&0) {
        return Err(Error::invalid("task counts must be positive"));
    }
    let groups = merge_map.iter().max().map_or(0, |m| m + 1);
    let mut merged = vec![0usize; groups];
    for (&c, &g) in counts.iter().zip(merge_map) {
        merged[g] += c;
    }
    let before = inverse_sum(counts);
    let after = inverse_sum(&merged);
    Ok(CorollaryCheck {
        before,
        after,
        // relative slack covers summation-order rounding only
        holds: after <= before * (1.0 + 1e-12),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = metrics(&cm(&[&[3, 0, 0], &[0, 7, 0], &[0, 0, 1]])).unwrap();
        assert_eq!((m.acc, m.bacc, m.macro_f1, m.g_means), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(per_class_accuracy(&cm(&[&[3, 0], &[0, 7]])), vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn two_class_hand_example() {
        let m = metrics(&cm(&[&[10, 0], &[5, 5]])).unwrap();
        assert!((m.bacc - 0.75).abs() < 1e-15);
        assert!((m.g_means - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((m.acc - 0.75).abs() < 1e-15);
        // F1: class 0 = 20/25, class 1 = 10/15
        assert!((m.macro_f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded() {
        let c = cm(&[&[4, 1, 0], &[0, 0, 0], &[1, 0, 3]]);
        let m = metrics(&c).unwrap();
        assert_eq!(m.absent, vec![1]);
        assert!((m.bacc - (0.8 + 0.75) / 2.0).abs() < 1e-15);
        let rec = per_class_accuracy(&c);
        assert_eq!(rec[1], None);
        let mean: f64 = rec.iter().flatten().sum::<f64>() / 2.0;
        assert_eq!(mean, m.bacc);
    }

    #[test]
    fn zero_recall_zeroes_g_means() {
        let m = metrics(&cm(&[&[5, 0], &[3, 0]])).unwrap();
        assert_eq!(m.g_means, 0.0);
        assert!(metrics(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn corollary_examples() {
        let c = corollary_check(&[3, 3], &[0, 0]).unwrap();
        assert!((c.before - 2.0 / 3.0).abs() < 1e-15 && (c.after - 1.0 / 6.0).abs() < 1e-15 && c.holds);
        let c = corollary_check(&[2, 5, 7], &[2, 0, 1]).unwrap();
        assert!((c.before - c.after).abs() < 1e-15 && c.holds);
        assert!(corollary_check(&[], &[]).is_err());
        assert!(corollary_check(&[1, 0], &[0, 0]).is_err());
    }

    #[test]
    fn corollary_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let t = rng.random_range(1..30);
            let counts: Vec<usize> = (0..t).map(|_| rng.random_range(1..200)).collect();
            let groups = rng.random_range(1..=t);
            let merge: Vec<usize> = (0..t).map(|_| rng.random_range(0..groups)).collect();
            assert!(corollary_check(&counts, &merge).unwrap().holds);
        }
    }

    #[test]
    fn uniform_inverse_sum() {
        assert!((inverse_sum(&[10; 4]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn composed_sizes_sum_to_n() {
        let a = TaskAssignment::new(vec![0, 1, 2, 2, 1, 0, 0], 3).unwrap();
        let b = TaskAssignment::new(vec![0, 1, 1], 2).unwrap();
        let sizes = composed_task_sizes(&[a, b]).unwrap();
        assert_eq!(sizes, vec![vec![3, 2, 2], vec![3, 4]]);
    }

    fn arb_cm() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..6).prop_flat_map(|t| {
            prop::collection::vec(0u64..20, t * t).prop_map(move |v| {
                let rows: Vec<Vec<u64>> = v.chunks(t).map(|c| c.to_vec()).collect();
                ConfusionMatrix::from_counts(&rows).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn metric_bounds(c in arb_cm()) {
            prop_assume!(c.total() > 0);
            let m = metrics(&c).unwrap();
            prop_assert!(0.0 <= m.g_means && m.g_means <= m.bacc && m.bacc <= 1.0);
            prop_assert!((0.0..=1.0).contains(&m.acc) && (0.0..=1.0).contains(&m.macro_f1));
        }

        #[test]
        fn permutation_invariance(c in arb_cm(), seed in 0u64..1000) {
            prop_assume!(c.total() > 0);
            let mut perm: Vec<usize> = (0..c.num_classes()).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = (metrics(&c).unwrap(), metrics(&c.permuted(&perm)).unwrap());
            prop_assert_eq!(a.acc, b.acc);
            prop_assert!((a.bacc - b.bacc).abs() < 1e-12);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((a.g_means - b.g_means).abs() < 1e-12);
        }

        #[test]
        fn balanced_rows_make_bacc_equal_acc(t in 2usize..7, per in 1u64..30, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = ConfusionMatrix::new(t);
            for truth in 0..t {
                for _ in 0..per {
                    c.add(truth, rng.random_range(0..t)).unwrap();
                }
            }
            let m = metrics(&c).unwrap();
            prop_assert_eq!(m.bacc, m.acc);
        }
    }
}
