//! Training objectives: node-classification cross-entropy, the balanced
//! contrastive loss over task groups, and the supervised contrastive loss
//! over labeled training nodes.
//!
//! Embeddings are L2-normalized before every contrastive term. Task
//! assignments are computed from values and carry no gradient.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AnchorSpec, ContrastPlan, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ForwardPass, ForwardTrace};

/// Node-to-task assignment of one grouping layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskAssignment {
    pub task: Vec<usize>,
    pub num_tasks: usize,
}

impl TaskAssignment {
    pub fn new(task: Vec<usize>, num_tasks: usize) -> Result<Self> {
        if let Some(&t) = task.iter().find(|&&t| t >= num_tasks) {
            return Err(Error::IndexOutOfRange {
                what: "task id",
                index: t,
                bound: num_tasks,
            });
        }
        Ok(Self { task, num_tasks })
    }

    /// `n_t`: assigned nodes per task, prototype excluded.
    pub fn sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.num_tasks];
        for &t in &self.task {
            n[t] += 1;
        }
        n
    }

    /// Assigned node ids of task `t` (the prototype is implicit).
    pub fn members(&self, t: usize) -> Vec<usize> {
        (0..self.task.len()).filter(|&i| self.task[i] == t).collect()
    }

    /// Composes with the next layer's assignment of this layer's tasks.
    pub fn then(&self, next: &TaskAssignment) -> Result<TaskAssignment> {
        if next.task.len() != self.num_tasks {
            return Err(Error::ShapeMismatch {
                op: "compose assignments",
                left: (self.task.len(), self.num_tasks),
                right: (next.task.len(), next.num_tasks),
            });
        }
        Ok(TaskAssignment {
            task: self.task.iter().map(|&t| next.task[t]).collect(),
            num_tasks: next.num_tasks,
        })
    }
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm < 1e-12 { 0.0 } else { 1.0 / norm };
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Cosine-nearest prototype per row, ties to the lower task id.
pub fn nearest_prototype_assignment(z: &Matrix, prototypes: &Matrix) -> Result<TaskAssignment> {
    if prototypes.rows() == 0 {
        return Err(Error::Empty("prototype set"));
    }
    if z.cols() != prototypes.cols() {
        return Err(Error::ShapeMismatch {
            op: "nearest_prototype_assignment",
            left: z.shape(),
            right: prototypes.shape(),
        });
    }
    let (zn, pn) = (unit_rows(z), unit_rows(prototypes));
    let task = (0..zn.rows())
        .map(|i| {
            let zi = zn.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for t in 0..pn.rows() {
                let s: f64 = zi.iter().zip(pn.row(t)).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (t, s);
                }
            }
            best.0
        })
        .collect();
    TaskAssignment::new(task, pn.rows())
}

/// Majority training label among the nodes assigned to each prototype
/// (ties to the lower class); `None` if no labeled node is assigned.
pub fn prototype_classes(a: &TaskAssignment, labels: &[Option<usize>], num_classes: usize) -> Vec<Option<usize>> {
    let mut votes = vec![vec![0usize; num_classes]; a.num_tasks];
    for (&t, l) in a.task.iter().zip(labels) {
        if let Some(c) = *l {
            votes[t][c] += 1;
        }
    }
    votes
        .iter()
        .map(|v| {
            let (c, &n) = v.iter().enumerate().rev().max_by_key(|&(_, n)| *n)?;
            (n > 0).then_some(c)
        })
        .collect()
}

/// Moves each labeled node to the lowest-id prototype whose class is its
/// label; nodes whose class has no prototype keep their nearest one.
pub fn apply_label_override(
    a: &TaskAssignment,
    proto_class: &[Option<usize>],
    labels: &[Option<usize>],
) -> TaskAssignment {
    let task = a
        .task
        .iter()
        .zip(labels)
        .map(|(&t, l)| {
            l.and_then(|c| proto_class.iter().position(|&pc| pc == Some(c)))
                .unwrap_or(t)
        })
        .collect();
    TaskAssignment {
        task,
        num_tasks: a.num_tasks,
    }
}

/// Contrastive hyperparameters shared by the two contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    /// Groups with more members than this have their denominator estimated
    /// from a uniform subsample of this size. `None` keeps it exact.
    pub member_cap: Option<usize>,
    pub seed: u64,
}

impl ContrastConfig {
    pub fn exact(tau: f64) -> Self {
        Self {
            tau,
            member_cap: None,
            seed: 0,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Denominator terms with group weight `w_q`; a capped group keeps `cap`
/// random members with coefficient `w_q |V_q| / cap`.
fn denominator(member_group: &[usize], weight: &[f64], cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<(usize, f64)> {
    let Some(cap) = cap.filter(|&c| c > 0) else {
        return ContrastPlan::full_denominator(member_group, weight);
    };
    let mut groups = vec![Vec::new(); weight.len()];
    for (k, &g) in member_group.iter().enumerate() {
        groups[g].push(k);
    }
    let mut out = Vec::new();
    for (q, members) in groups.iter().enumerate() {
        if members.len() <= cap {
            out.extend(members.iter().map(|&k| (k, weight[q])));
        } else {
            let c = weight[q] * members.len() as f64 / cap as f64;
            let mut picked: Vec<usize> = sample(rng, members.len(), cap).into_iter().map(|i| members[i]).collect();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|k| (k, c)));
        }
    }
    out
}

/// Plan for one grouping layer: anchors are the `n` node rows, members are
/// the node rows followed by the prototype rows.
pub fn bcl_plan(a: &TaskAssignment, cfg: &ContrastConfig) -> Result<ContrastPlan> {
    check_tau(cfg.tau)?;
    let n = a.task.len();
    let mut member_group = a.task.clone();
    member_group.extend(0..a.num_tasks);
    let weight: Vec<f64> = a.sizes().iter().map(|&s| 1.0 / (s as f64 + 1.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let denominator = denominator(&member_group, &weight, cfg.member_cap, &mut rng);
    let anchors = (0..n)
        .map(|i| {
            Some(AnchorSpec {
                group: a.task[i],
                self_member: Some(i),
            })
        })
        .collect();
    Ok(ContrastPlan {
        tau: cfg.tau,
        num_groups: a.num_tasks,
        member_group,
        anchors,
        denominator,
    })
}

/// Balanced contrastive loss of one layer on the tape.
pub fn bcl_on_tape(tape: &mut Tape, z: Var, prototypes: Var, a: &TaskAssignment, cfg: &ContrastConfig) -> Result<Var> {
    if tape.value(z).rows() != a.task.len() || tape.value(prototypes).rows() != a.num_tasks {
        return Err(Error::ShapeMismatch {
            op: "bcl",
            left: (tape.value(z).rows(), tape.value(prototypes).rows()),
            right: (a.task.len(), a.num_tasks),
        });
    }
    let plan = Arc::new(bcl_plan(a, cfg)?);
    let zn = tape.row_l2_normalize(z)?;
    let pn = tape.row_l2_normalize(prototypes)?;
    let members = tape.concat_rows(zn, pn)?;
    tape.contrastive(zn, members, plan)
}

/// Value of the balanced contrastive loss, exact denominator.
pub fn bcl_loss(z: &Matrix, prototypes: &Matrix, a: &TaskAssignment, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let pv = tape.constant(prototypes.clone());
    let out = bcl_on_tape(&mut tape, zv, pv, a, &ContrastConfig::exact(tau))?;
    Ok(tape.value(out).item())
}

/// Training-labeled node ids and their classes.
fn labeled_rows(labels: &[Option<usize>], mask: &[bool]) -> Vec<(usize, usize)> {
    labels
        .iter()
        .zip(mask)
        .enumerate()
        .filter_map(|(i, (l, &m))| if m { l.map(|c| (i, c)) } else { None })
        .collect()
}

/// Supervised contrastive loss over the training-labeled rows of `z`. Each
/// anchor averages over the other nodes of its class; nodes alone in their
/// class are not anchors but still appear in every denominator.
pub fn scl_on_tape(
    tape: &mut Tape,
    z: Var,
    labels: &[Option<usize>],
    mask: &[bool],
    num_classes: usize,
    cfg: &ContrastConfig,
) -> Result<Var> {
    check_tau(cfg.tau)?;
    let rows = labeled_rows(labels, mask);
    if rows.iter().any(|&(_, c)| c >= num_classes) {
        return Err(Error::invalid("label outside class range"));
    }
    let mut sizes = vec![0usize; num_classes];
    for &(_, c) in &rows {
        sizes[c] += 1;
    }
    if !sizes.iter().any(|&s| s >= 2) {
        return Err(Error::Empty("supervised contrastive positives"));
    }
    let idx: Vec<usize> = rows.iter().map(|&(i, _)| i).collect();
    let member_group: Vec<usize> = rows.iter().map(|&(_, c)| c).collect();
    let weight: Vec<f64> = sizes.iter().map(|&s| if s > 0 { 1.0 / s as f64 } else { 0.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let denominator = denominator(&member_group, &weight, cfg.member_cap, &mut rng);
    let anchors = member_group
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            Some(AnchorSpec {
                group: c,
                self_member: Some(j),
            })
        })
        .collect();
    let plan = Arc::new(ContrastPlan {
        tau: cfg.tau,
        num_groups: num_classes,
        member_group,
        anchors,
        denominator,
    });
    let picked = tape.row_gather(z, &idx)?;
    let zn = tape.row_l2_normalize(picked)?;
    tape.contrastive(zn, zn, plan)
}

/// Value of the supervised contrastive loss, exact denominator.
pub fn scl_loss(z: &Matrix, labels: &[Option<usize>], mask: &[bool], num_classes: usize, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = scl_on_tape(&mut tape, zv, labels, mask, num_classes, &ContrastConfig::exact(tau))?;
    Ok(tape.value(out).item())
}

/// Mean softmax cross-entropy over the masked labeled rows.
pub fn nc_loss(logits: &Matrix, labels: &[Option<usize>], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = tape.softmax_cross_entropy(l, labels, mask)?;
    Ok(tape.value(out).item())
}

pub fn total_loss(nc: f64, bcl: f64, scl: f64, gamma: f64) -> f64 {
    nc + gamma * (bcl + scl)
}

/// Max minus min of per-task losses.
pub fn loss_range(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Empty("per-task losses"));
    }
    let max = per_task.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_task.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Mean unweighted cross-entropy per class over masked rows; `None` for a
/// class with no masked row.
pub fn per_class_cross_entropy(
    logits: &Matrix,
    labels: &[Option<usize>],
    mask: &[bool],
    num_classes: usize,
) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; num_classes];
    let mut count = vec![0usize; num_classes];
    for (i, c) in labeled_rows(labels, mask) {
        if c >= num_classes || i >= logits.rows() {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum[c] += lse - row[c];
        count[c] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect()
}

/// Per-epoch loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub nc: f64,
    pub bcl_layers: Vec<f64>,
    pub bcl: f64,
    pub scl: f64,
    pub total: f64,
    pub gamma: f64,
    /// Mean training CE per class.
    pub per_class_ce: Vec<f64>,
}

impl LossReport {
    pub fn loss_range(&self) -> f64 {
        loss_range(&self.per_class_ce).unwrap_or(0.0)
    }
}

/// Weights and switches for [`objective`].
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub gamma: f64,
    pub contrast: ContrastConfig,
    /// Per-class CE weights; `None` is unweighted.
    pub class_weights: Option<Vec<f64>>,
}

pub struct Objective {
    pub loss: Var,
    pub report: LossReport,
}

/// Assignment of every grouping layer. Layer 0 uses prototype classes from
/// the training labels and the label override.
pub fn layer_assignments(
    tape: &Tape,
    trace: &ForwardTrace,
    train_labels: &[Option<usize>],
    num_classes: usize,
) -> Result<Vec<TaskAssignment>> {
    let mut out = Vec::with_capacity(trace.levels.len());
    for (l, level) in trace.levels.iter().enumerate() {
        let z = tape.value(trace.level_input(l));
        let p = tape.value(level.prototypes);
        let mut a = nearest_prototype_assignment(z, p)?;
        if l == 0 {
            let classes = prototype_classes(&a, train_labels, num_classes);
            a = apply_label_override(&a, &classes, train_labels);
        }
        out.push(a);
    }
    Ok(out)
}

/// Builds the total loss on the pass's tape.
pub fn objective(
    pass: &mut ForwardPass,
    labels: &[Option<usize>],
    train_mask: &[bool],
    num_classes: usize,
    cfg: &ObjectiveConfig,
) -> Result<Objective> {
    let trace = &pass.trace;
    let tape = &mut pass.tape;
    let nc = tape.weighted_softmax_cross_entropy(trace.logits, labels, train_mask, cfg.class_weights.as_deref())?;

    let per_class = per_class_cross_entropy(tape.value(trace.logits), labels, train_mask, num_classes);
    let per_class_ce = per_class
        .iter()
        .enumerate()
        .map(|(c, v)| v.ok_or_else(|| Error::invalid(format!("class {c} has no training node"))))
        .collect::<Result<Vec<f64>>>()?;

    let mut bcl_layers = Vec::new();
    let (mut bcl, mut scl) = (0.0, 0.0);
    let loss = if cfg.gamma > 0.0 {
        check_tau(cfg.contrast.tau)?;
        let train_labels: Vec<Option<usize>> = labels
            .iter()
            .zip(train_mask)
            .map(|(l, &m)| if m { *l } else { None })
            .collect();
        let assignments = layer_assignments(tape, trace, &train_labels, num_classes)?;
        let mut layer_vars = Vec::new();
        for (l, a) in assignments.iter().enumerate() {
            let layer_cfg = ContrastConfig {
                seed: cfg.contrast.seed.wrapping_add(l as u64),
                ..cfg.contrast
            };
            let v = bcl_on_tape(tape, trace.level_input(l), trace.levels[l].prototypes, a, &layer_cfg)?;
            bcl_layers.push(tape.value(v).item());
            layer_vars.push(v);
        }
        let scl_cfg = ContrastConfig {
            seed: cfg.contrast.seed.wrapping_add(1 << 32),
            ..cfg.contrast
        };
        let mut counts = vec![0usize; num_classes];
        for (_, c) in labeled_rows(labels, train_mask) {
            counts[c] += 1;
        }
        // without a positive pair the supervised term is zero
        let scl_var = if counts.iter().any(|&k| k >= 2) {
            let v = scl_on_tape(tape, trace.final_embeddings, labels, train_mask, num_classes, &scl_cfg)?;
            scl = tape.value(v).item();
            Some(v)
        } else {
            None
        };
        let bcl_var = if layer_vars.is_empty() {
            None
        } else {
            let mut acc = layer_vars[0];
            for &v in &layer_vars[1..] {
                acc = tape.add(acc, v)?;
            }
            let mean = tape.scale(acc, 1.0 / layer_vars.len() as f64)?;
            bcl = tape.value(mean).item();
            Some(mean)
        };
        let contrast = match (bcl_var, scl_var) {
            (Some(b), Some(s)) => Some(tape.add(b, s)?),
            (b, s) => b.or(s),
        };
        match contrast {
            Some(c) => {
                let weighted = tape.scale(c, cfg.gamma)?;
                tape.add(nc, weighted)?
            }
            None => nc,
        }
    } else {
        nc
    };
    let total = tape.value(loss).item();
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok(Objective {
        loss,
        report: LossReport {
            nc: tape.value(nc).item(),
            bcl_layers,
            bcl,
            scl,
            total,
            gamma: cfg.gamma,
            per_class_ce,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct evaluation of the balanced loss: plain exp and log, members of
    /// task q are its assigned nodes plus prototype q.
    fn bcl_oracle(z: &Matrix, p: &Matrix, task: &[usize], tau: f64) -> f64 {
        let n = z.rows();
        let t = p.rows();
        let zs: Vec<Vec<f64>> = (0..n).map(|i| unit(z.row(i))).collect();
        let ps: Vec<Vec<f64>> = (0..t).map(|q| unit(p.row(q))).collect();
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for q in 0..t {
                let nq = task.iter().filter(|&&x| x == q).count();
                let mut s = (dot(&zs[i], &ps[q]) / tau).exp();
                for k in 0..n {
                    if task[k] == q {
                        s += (dot(&zs[i], &zs[k]) / tau).exp();
                    }
                }
                denom += s / (nq as f64 + 1.0);
            }
            let ti = task[i];
            let nt = task.iter().filter(|&&x| x == ti).count();
            let mut acc = ((dot(&zs[i], &ps[ti]) / tau).exp() / denom).ln();
            for j in 0..n {
                if j != i && task[j] == ti {
                    acc += ((dot(&zs[i], &zs[j]) / tau).exp() / denom).ln();
                }
            }
            total += -acc / nt as f64;
        }
        total / n as f64
    }

    /// Direct evaluation of the supervised loss over labeled rows, averaging
    /// each anchor over its `|V_t| - 1` positives.
    fn scl_oracle(z: &Matrix, labels: &[Option<usize>], t: usize, tau: f64) -> f64 {
        let rows: Vec<(Vec<f64>, usize)> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|c| (unit(z.row(i)), c)))
            .collect();
        let count = |c: usize| rows.iter().filter(|r| r.1 == c).count();
        let (mut total, mut anchors) = (0.0, 0);
        for (i, (zi, ci)) in rows.iter().enumerate() {
            let nt = count(*ci);
            if nt < 2 {
                continue;
            }
            let mut denom = 0.0;
            for q in 0..t {
                let nq = count(q);
                let s: f64 = rows.iter().filter(|r| r.1 == q).map(|r| (dot(zi, &r.0) / tau).exp()).sum();
                if nq > 0 {
                    denom += s / nq as f64;
                }
            }
            let mut acc = 0.0;
            for (j, (zj, cj)) in rows.iter().enumerate() {
                if j != i && cj == ci {
                    acc += ((dot(zi, zj) / tau).exp() / denom).ln();
                }
            }
            total += -acc / (nt - 1) as f64;
            anchors += 1;
        }
        total / anchors as f64
    }

    #[test]
    fn assignment_self_match_and_ties() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let z = Matrix::from_rows(&[vec![0.0, 3.0], vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let a = nearest_prototype_assignment(&z, &p).unwrap();
        assert_eq!(a.task, vec![1, 0, 0]);
        assert_eq!(a.sizes(), vec![2, 1]);
        assert!(nearest_prototype_assignment(&z, &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn assignment_matches_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random(10, 4, &mut rng);
        let p = random(3, 4, &mut rng);
        let a = nearest_prototype_assignment(&z, &p).unwrap();
        for i in 0..10 {
            let sims: Vec<f64> = (0..3).map(|t| dot(&unit(z.row(i)), &unit(p.row(t)))).collect();
            let best = (0..3).max_by(|&x, &y| sims[x].total_cmp(&sims[y]).then(y.cmp(&x))).unwrap();
            assert_eq!(a.task[i], best);
        }
    }

    #[test]
    fn label_override_uses_majority_prototypes() {
        let a = TaskAssignment::new(vec![0, 0, 1, 1, 2], 3).unwrap();
        let labels = [Some(1), Some(1), Some(0), None, Some(0)];
        let classes = prototype_classes(&a, &labels, 3);
        assert_eq!(classes, vec![Some(1), Some(0), Some(0)]);
        let o = apply_label_override(&a, &classes, &labels);
        assert_eq!(o.task, vec![0, 0, 1, 1, 1]);
        let with_missing = apply_label_override(&a, &classes, &[Some(2), None, None, None, None]);
        assert_eq!(with_missing.task[0], 0);
    }

    #[test]
    fn bcl_identical_embeddings_is_log_tasks() {
        for (t, tau) in [(3usize, 0.5), (5, 0.1), (2, 1.0)] {
            let z = Matrix::filled(12, 4, 0.7);
            let p = Matrix::filled(t, 4, 0.7);
            let task: Vec<usize> = (0..12).map(|i| i % t).collect();
            let a = TaskAssignment::new(task, t).unwrap();
            let v = bcl_loss(&z, &p, &a, tau).unwrap();
            assert!((v - (t as f64).ln()).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn bcl_two_tasks_and_single_task_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random(4, 3, &mut rng);
        let p = random(2, 3, &mut rng);
        let task = vec![0, 1, 0, 1];
        let v = bcl_loss(&z, &p, &TaskAssignment::new(task.clone(), 2).unwrap(), 0.5).unwrap();
        assert!((v - bcl_oracle(&z, &p, &task, 0.5)).abs() < 1e-10);
        let p1 = random(1, 3, &mut rng);
        let v = bcl_loss(&z, &p1, &TaskAssignment::new(vec![0; 4], 1).unwrap(), 0.5).unwrap();
        assert!((v - bcl_oracle(&z, &p1, &[0; 4], 0.5)).abs() < 1e-10);
        let same = Matrix::filled(4, 3, 1.0);
        let v = bcl_loss(&same, &Matrix::filled(1, 3, 1.0), &TaskAssignment::new(vec![0; 4], 1).unwrap(), 0.5).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn bcl_rejects_bad_tau() {
        let a = TaskAssignment::new(vec![0], 1).unwrap();
        assert!(bcl_loss(&Matrix::filled(1, 2, 1.0), &Matrix::filled(1, 2, 1.0), &a, 0.0).is_err());
        assert!(bcl_loss(&Matrix::filled(1, 2, 1.0), &Matrix::filled(1, 2, 1.0), &a, -1.0).is_err());
    }

    #[test]
    fn scl_identical_embeddings_is_log_classes() {
        let labels: Vec<Option<usize>> = [0, 0, 0, 1, 1, 2, 2, 2, 2].map(Some).to_vec();
        let v = scl_loss(&Matrix::filled(9, 3, -0.2), &labels, &[true; 9], 3, 0.1).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn scl_matches_oracle_and_singleton_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(6, 4, &mut rng);
        let labels: Vec<Option<usize>> = [0, 0, 1, 1, 2, 2].map(Some).to_vec();
        let v = scl_loss(&z, &labels, &[true; 6], 3, 0.5).unwrap();
        assert!((v - scl_oracle(&z, &labels, 3, 0.5)).abs() < 1e-10);
        let labels = [Some(0), Some(0), Some(1), Some(1), Some(2), None];
        let v = scl_loss(&z, &labels, &[true; 6], 3, 0.5).unwrap();
        assert!((v - scl_oracle(&z, &labels, 3, 0.5)).abs() < 1e-10);
        let lonely = [Some(0), Some(1), Some(2), None, None, None];
        assert!(scl_loss(&z, &lonely, &[true; 6], 3, 0.5).is_err());
    }

    #[test]
    fn scl_ignores_unmasked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(6, 3, &mut rng);
        let labels: Vec<Option<usize>> = [0, 0, 1, 1, 0, 1].map(Some).to_vec();
        let mask = [true, true, true, true, false, false];
        let v = scl_loss(&z, &labels, &mask, 2, 0.3).unwrap();
        let visible = [Some(0), Some(0), Some(1), Some(1), None, None];
        assert!((v - scl_oracle(&z, &visible, 2, 0.3)).abs() < 1e-10);
    }

    #[test]
    fn nc_loss_cases() {
        let perfect = Matrix::from_rows(&[vec![20.0, 0.0], vec![0.0, 20.0]]).unwrap();
        assert!(nc_loss(&perfect, &[Some(0), Some(1)], &[true, true]).unwrap() < 1e-6);
        let uniform = Matrix::zeros(3, 4);
        let v = nc_loss(&uniform, &[Some(0), Some(3), Some(2)], &[true; 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(5, 3, &mut rng);
        let labels = [Some(0), Some(2), Some(1), Some(1), Some(0)];
        let mask = [true, true, false, true, true];
        let mut want = 0.0;
        for i in [0, 1, 3, 4] {
            let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            want += -(x.get(i, labels[i].unwrap()).exp() / z).ln();
        }
        assert!((nc_loss(&x, &labels, &mask).unwrap() - want / 4.0).abs() < 1e-12);
        assert!(nc_loss(&x, &labels, &[false; 5]).is_err());
    }

    #[test]
    fn total_and_range() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0), 1.0);
        assert!((total_loss(1.0, 2.0, 3.0, 0.1) - 1.5).abs() < 1e-15);
        assert!((loss_range(&[0.5, 0.2, 0.9]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(loss_range(&[0.3; 4]).unwrap(), 0.0);
        assert!(loss_range(&[]).is_err());
    }

    #[test]
    fn balance_weights_cancel_group_sizes() {
        let a = TaskAssignment::new(vec![0, 0, 0, 1, 2, 2], 3).unwrap();
        let plan = bcl_plan(&a, &ContrastConfig::exact(1.0)).unwrap();
        let mut mass = vec![0.0; 3];
        for &(k, c) in &plan.denominator {
            mass[plan.member_group[k]] += c;
        }
        for m in mass {
            assert!((m - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicating_a_task_rescales_its_denominator_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random(3, 3, &mut rng);
        let p = random(2, 3, &mut rng);
        let task = vec![0, 0, 1];
        let base = bcl_oracle(&z, &p, &task, 0.7);
        let ours = bcl_loss(&z, &p, &TaskAssignment::new(task.clone(), 2).unwrap(), 0.7).unwrap();
        assert!((base - ours).abs() < 1e-10);
        // Duplicate the nodes of task 0 twice: the loss still matches the oracle.
        let rows: Vec<Vec<f64>> = [0, 1, 0, 1, 2].iter().map(|&i| z.row(i).to_vec()).collect();
        let zd = Matrix::from_rows(&rows).unwrap();
        let td = vec![0, 0, 0, 0, 1];
        let dup = bcl_loss(&zd, &p, &TaskAssignment::new(td.clone(), 2).unwrap(), 0.7).unwrap();
        assert!((dup - bcl_oracle(&zd, &p, &td, 0.7)).abs() < 1e-10);
    }

    #[test]
    fn capped_denominator_is_unbiased_in_mass() {
        let a = TaskAssignment::new((0..50).map(|i| usize::from(i >= 40)).collect(), 2).unwrap();
        let cfg = ContrastConfig {
            tau: 0.5,
            member_cap: Some(8),
            seed: 3,
        };
        let plan = bcl_plan(&a, &cfg).unwrap();
        assert_eq!(plan.denominator.len(), 16);
        let mut mass = [0.0; 2];
        for &(k, c) in &plan.denominator {
            mass[plan.member_group[k]] += c;
        }
        assert!((mass[0] - 1.0).abs() < 1e-12 && (mass[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_tau_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random(8, 4, &mut rng);
        let p = random(3, 4, &mut rng);
        let a = nearest_prototype_assignment(&z, &p).unwrap();
        assert!(bcl_loss(&z, &p, &a, 0.01).unwrap().is_finite());
        let labels: Vec<Option<usize>> = (0..8).map(|i| Some(i % 3)).collect();
        assert!(scl_loss(&z, &labels, &[true; 8], 3, 0.01).unwrap().is_finite());
    }

    #[test]
    fn compose_assignments() {
        let a = TaskAssignment::new(vec![0, 2, 1, 2], 3).unwrap();
        let b = TaskAssignment::new(vec![1, 0, 1], 2).unwrap();
        let c = a.then(&b).unwrap();
        assert_eq!(c.task, vec![1, 1, 0, 1]);
        assert_eq!(c.sizes().iter().sum::<usize>(), 4);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        use crate::gradcheck::{max_rel_error, numeric_gradient};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = random(7, 3, &mut rng);
        let p = random(3, 3, &mut rng);
        let a = nearest_prototype_assignment(&z, &p).unwrap();
        let tau = 0.3;

        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let pv = tape.param(p.clone());
        let loss = bcl_on_tape(&mut tape, zv, pv, &a, &ContrastConfig::exact(tau)).unwrap();
        let g = tape.backward(loss).unwrap();
        let nz = numeric_gradient(&z, 1e-6, |m| bcl_loss(m, &p, &a, tau).unwrap());
        let np = numeric_gradient(&p, 1e-6, |m| bcl_loss(&z, m, &a, tau).unwrap());
        assert!(max_rel_error(&g.wrt(&tape, zv), &nz, 1e-6) < 1e-5);
        assert!(max_rel_error(&g.wrt(&tape, pv), &np, 1e-6) < 1e-5);

        let labels = [Some(0), Some(1), Some(0), Some(1), Some(1), Some(2), None];
        let mask = [true, true, true, true, true, true, false];
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let loss = scl_on_tape(&mut tape, zv, &labels, &mask, 3, &ContrastConfig::exact(tau)).unwrap();
        let g = tape.backward(loss).unwrap();
        let nz = numeric_gradient(&z, 1e-6, |m| scl_loss(m, &labels, &mask, 3, tau).unwrap());
        assert!(max_rel_error(&g.wrt(&tape, zv), &nz, 1e-6) < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]

        #[test]
        fn bcl_equals_oracle(seed in 0u64..10_000, n in 2usize..9, t in 1usize..4, tau in 0.2f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random(n, 3, &mut rng);
            let p = random(t, 3, &mut rng);
            let task: Vec<usize> = (0..n).map(|_| rng.random_range(0..t)).collect();
            let v = bcl_loss(&z, &p, &TaskAssignment::new(task.clone(), t).unwrap(), tau).unwrap();
            prop_assert!((v - bcl_oracle(&z, &p, &task, tau)).abs() < 1e-10);
        }

        #[test]
        fn scl_equals_oracle(seed in 0u64..10_000, n in 3usize..10, t in 1usize..4, tau in 0.2f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random(n, 3, &mut rng);
            let mut labels: Vec<Option<usize>> = (0..n)
                .map(|_| if rng.random_bool(0.8) { Some(rng.random_range(0..t)) } else { None })
                .collect();
            labels[0] = Some(0);
            labels[1] = Some(0);
            let v = scl_loss(&z, &labels, &vec![true; n], t, tau).unwrap();
            prop_assert!((v - scl_oracle(&z, &labels, t, tau)).abs() < 1e-10);
        }

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 7;
            let z = random(n, 3, &mut rng);
            let p = random(2, 3, &mut rng);
            let task: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % 2)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let zp = z.gather_rows(&perm);
            let tp: Vec<usize> = perm.iter().map(|&i| task[i]).collect();
            let lp: Vec<Option<usize>> = perm.iter().map(|&i| labels[i]).collect();
            let b0 = bcl_loss(&z, &p, &TaskAssignment::new(task, 2).unwrap(), 0.4).unwrap();
            let b1 = bcl_loss(&zp, &p, &TaskAssignment::new(tp, 2).unwrap(), 0.4).unwrap();
            prop_assert!((b0 - b1).abs() < 1e-12);
            let s0 = scl_loss(&z, &labels, &vec![true; n], 2, 0.4).unwrap();
            let s1 = scl_loss(&zp, &lp, &vec![true; n], 2, 0.4).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-12);
        }
    }
}
