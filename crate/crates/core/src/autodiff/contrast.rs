//! Fused grouped contrastive objective.
//!
//! Anchors `a_i` and members `m_k` are compared through `s_ik = a_i . m_k / tau`.
//! Every member belongs to a group. An anchor with group `t` has as positives
//! all members of `t` except its own member row (if it has one). Its loss is
//!
//! ```text
//! loss_i = log( sum_{(k, c_k) in denominator} c_k exp(s_ik) ) - mean_{j in P(i)} s_ij
//! ```
//!
//! and the op returns the mean over anchors with at least one positive.
//! Positive sums use per-group member totals, and the denominator is streamed
//! per anchor, so memory stays linear in the number of rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorSpec {
    pub group: usize,
    /// Member row that is the anchor itself, excluded from its positives.
    pub self_member: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ContrastPlan {
    pub tau: f64,
    pub num_groups: usize,
    pub member_group: Vec<usize>,
    /// One entry per anchor row; `None` skips the row.
    pub anchors: Vec<Option<AnchorSpec>>,
    /// `(member, coefficient)` terms of every anchor's denominator.
    pub denominator: Vec<(usize, f64)>,
}

impl ContrastPlan {
    /// Denominator over every member, weighted by its group's coefficient.
    pub fn full_denominator(member_group: &[usize], group_weight: &[f64]) -> Vec<(usize, f64)> {
        member_group
            .iter()
            .enumerate()
            .map(|(k, &g)| (k, group_weight[g]))
            .collect()
    }

    /// Number of members per group.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups];
        for &g in &self.member_group {
            sizes[g] += 1;
        }
        sizes
    }

    fn positives(&self, spec: &AnchorSpec, sizes: &[usize]) -> usize {
        let own = spec
            .self_member
            .is_some_and(|m| self.member_group[m] == spec.group);
        sizes[spec.group] - usize::from(own)
    }

    /// Positive count per anchor (0 for skipped anchors).
    pub fn positive_counts(&self) -> Vec<usize> {
        let sizes = self.group_sizes();
        self.anchors
            .iter()
            .map(|a| a.as_ref().map_or(0, |s| self.positives(s, &sizes)))
            .collect()
    }

    fn validate(&self, anchors: &Matrix, members: &Matrix) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if anchors.cols() != members.cols() {
            return Err(Error::ShapeMismatch {
                op: "contrastive",
                left: anchors.shape(),
                right: members.shape(),
            });
        }
        if self.anchors.len() != anchors.rows() || self.member_group.len() != members.rows() {
            return Err(Error::ShapeMismatch {
                op: "contrastive plan",
                left: (self.anchors.len(), self.member_group.len()),
                right: (anchors.rows(), members.rows()),
            });
        }
        if let Some(&g) = self.member_group.iter().find(|&&g| g >= self.num_groups) {
            return Err(Error::IndexOutOfRange {
                what: "contrastive member group",
                index: g,
                bound: self.num_groups,
            });
        }
        for spec in self.anchors.iter().flatten() {
            if spec.group >= self.num_groups {
                return Err(Error::IndexOutOfRange {
                    what: "contrastive anchor group",
                    index: spec.group,
                    bound: self.num_groups,
                });
            }
            if let Some(m) = spec.self_member {
                if m >= members.rows() {
                    return Err(Error::IndexOutOfRange {
                        what: "contrastive self member",
                        index: m,
                        bound: members.rows(),
                    });
                }
            }
        }
        if self.denominator.is_empty() {
            return Err(Error::Empty("contrastive denominator"));
        }
        for &(k, c) in &self.denominator {
            if k >= members.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "contrastive denominator",
                    index: k,
                    bound: members.rows(),
                });
            }
            if !(c > 0.0) {
                return Err(Error::invalid("contrastive coefficients must be positive"));
            }
        }
        Ok(())
    }
}

pub(crate) struct Cache {
    log_denom: Vec<f64>,
    positives: Vec<usize>,
    active: usize,
    group_sums: Matrix,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn group_sums(members: &Matrix, plan: &ContrastPlan) -> Matrix {
    let mut sums = Matrix::zeros(plan.num_groups, members.cols());
    for (k, &g) in plan.member_group.iter().enumerate() {
        for (o, &x) in sums.row_mut(g).iter_mut().zip(members.row(k)) {
            *o += x;
        }
    }
    sums
}

/// `G_t - m_self` for an anchor, i.e. the sum of its positives.
fn positive_sum(members: &Matrix, plan: &ContrastPlan, sums: &Matrix, spec: &AnchorSpec) -> Vec<f64> {
    let mut v = sums.row(spec.group).to_vec();
    if let Some(m) = spec.self_member {
        if plan.member_group[m] == spec.group {
            for (o, &x) in v.iter_mut().zip(members.row(m)) {
                *o -= x;
            }
        }
    }
    v
}

fn log_denominator(a: &[f64], members: &Matrix, plan: &ContrastPlan) -> f64 {
    let inv_tau = 1.0 / plan.tau;
    let mut max = f64::NEG_INFINITY;
    for &(k, c) in &plan.denominator {
        max = max.max(dot(a, members.row(k)) * inv_tau + c.ln());
    }
    let mut acc = 0.0;
    for &(k, c) in &plan.denominator {
        acc += (dot(a, members.row(k)) * inv_tau + c.ln() - max).exp();
    }
    max + acc.ln()
}

pub(crate) fn forward(anchors: &Matrix, members: &Matrix, plan: &ContrastPlan) -> Result<(f64, Cache)> {
    plan.validate(anchors, members)?;
    let positives = plan.positive_counts();
    let active = positives.iter().filter(|&&p| p > 0).count();
    if active == 0 {
        return Err(Error::Empty("contrastive: no anchor has a positive"));
    }
    let sums = group_sums(members, plan);
    let inv_tau = 1.0 / plan.tau;

    let per_anchor: Vec<(f64, f64)> = (0..anchors.rows())
        .into_par_iter()
        .map(|i| {
            let Some(spec) = plan.anchors[i].as_ref().filter(|_| positives[i] > 0) else {
                return (0.0, 0.0);
            };
            let a = anchors.row(i);
            let log_d = log_denominator(a, members, plan);
            let pos = dot(a, &positive_sum(members, plan, &sums, spec)) * inv_tau;
            (log_d, log_d - pos / positives[i] as f64)
        })
        .collect();

    let total: f64 = per_anchor.iter().map(|&(_, l)| l).sum();
    let cache = Cache {
        log_denom: per_anchor.iter().map(|&(d, _)| d).collect(),
        positives,
        active,
        group_sums: sums,
    };
    Ok((total / active as f64, cache))
}

pub(crate) fn backward(
    anchors: &Matrix,
    members: &Matrix,
    plan: &ContrastPlan,
    cache: &Cache,
    upstream: f64,
) -> (Matrix, Matrix) {
    let k_dim = anchors.cols();
    let coef = upstream / cache.active as f64 / plan.tau;
    let inv_tau = 1.0 / plan.tau;
    let is_active = |i: usize| cache.positives[i] > 0 && plan.anchors[i].is_some();

    // Anchor side: softmax-weighted member mean minus positive mean.
    let mut d_anchors = Matrix::zeros(anchors.rows(), k_dim);
    d_anchors
        .as_mut_slice()
        .par_chunks_mut(k_dim.max(1))
        .enumerate()
        .for_each(|(i, out)| {
            if !is_active(i) {
                return;
            }
            let spec = plan.anchors[i].as_ref().unwrap();
            let a = anchors.row(i);
            let log_d = cache.log_denom[i];
            for &(k, c) in &plan.denominator {
                let m = members.row(k);
                let w = (dot(a, m) * inv_tau + c.ln() - log_d).exp();
                for (o, &x) in out.iter_mut().zip(m) {
                    *o += w * x;
                }
            }
            let pos = positive_sum(members, plan, &cache.group_sums, spec);
            let inv_p = 1.0 / cache.positives[i] as f64;
            for (o, &x) in out.iter_mut().zip(&pos) {
                *o = coef * (*o - inv_p * x);
            }
        });

    // Member side, denominator terms.
    let den_rows: Vec<Vec<f64>> = plan
        .denominator
        .par_iter()
        .map(|&(k, c)| {
            let m = members.row(k);
            let mut row = vec![0.0; k_dim];
            for i in 0..anchors.rows() {
                if !is_active(i) {
                    continue;
                }
                let a = anchors.row(i);
                let w = (dot(a, m) * inv_tau + c.ln() - cache.log_denom[i]).exp();
                for (o, &x) in row.iter_mut().zip(a) {
                    *o += w * x;
                }
            }
            row
        })
        .collect();
    let mut d_members = Matrix::zeros(members.rows(), k_dim);
    for (&(k, _), row) in plan.denominator.iter().zip(&den_rows) {
        for (o, &x) in d_members.row_mut(k).iter_mut().zip(row) {
            *o += coef * x;
        }
    }

    // Member side, positive terms via per-group anchor totals.
    let mut anchor_totals = Matrix::zeros(plan.num_groups, k_dim);
    for (i, spec) in plan.anchors.iter().enumerate() {
        let Some(spec) = spec.as_ref().filter(|_| is_active(i)) else { continue };
        let inv_p = 1.0 / cache.positives[i] as f64;
        for (o, &x) in anchor_totals.row_mut(spec.group).iter_mut().zip(anchors.row(i)) {
            *o += inv_p * x;
        }
    }
    for (k, &g) in plan.member_group.iter().enumerate() {
        for (o, &x) in d_members.row_mut(k).iter_mut().zip(anchor_totals.row(g)) {
            *o -= coef * x;
        }
    }
    // Undo the self-pair that the group total included.
    for (i, spec) in plan.anchors.iter().enumerate() {
        let Some(spec) = spec.as_ref().filter(|_| is_active(i)) else { continue };
        let Some(m) = spec.self_member.filter(|&m| plan.member_group[m] == spec.group) else {
            continue;
        };
        let inv_p = 1.0 / cache.positives[i] as f64;
        for (o, &x) in d_members.row_mut(m).iter_mut().zip(anchors.row(i)) {
            *o += coef * inv_p * x;
        }
    }
    (d_anchors, d_members)
}
