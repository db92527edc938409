//! Central finite differences, used to check analytic gradients, and the
//! reference suites that exercise every tape primitive and the full
//! objective.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AnchorSpec, CeRow, ContrastPlan, Tape, Var};
use crate::graph::{GcnVariant, LabeledGraph, Masks};
use crate::losses::{objective, ContrastConfig, ObjectiveConfig};
use crate::matrix::{CsrMatrix, Matrix};
use crate::model::{forward, Activation, Mode, ModelConfig, PreparedGraph, Tail2LearnModel};
use crate::Result;

/// Numerical gradient of a scalar function of one matrix.
pub fn numeric_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(r, c, data).expect("shape")
}

/// Magnitudes in `[0.2, 1.5)` keep kinks and logs outside the probe step.
fn random_signed(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let data = (0..r * c)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Matrix::from_vec(r, c, data).expect("shape")
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Worst relative error over all inputs of `build`, scalarized with a fixed
/// random weighting of its output.
fn worst_error(inputs: &[Matrix], build: &Build) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let (r, c) = tape.value(out).shape();
        random(&mut rng, r, c, -1.0, 1.0)
    };
    let eval = |ms: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ms.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let w = tape.constant(probe.clone());
        let weighted = tape.hadamard(out, w)?;
        let loss = tape.sum(weighted)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        let numeric = numeric_gradient(&inputs[k], H, |x| {
            let mut ms = inputs.to_vec();
            ms[k] = x.clone();
            let (t, _, l) = eval(&ms).expect("perturbed build");
            t.value(l).item()
        });
        worst = worst.max(max_rel_error(&analytic, &numeric, FLOOR));
    }
    Ok(worst)
}

/// Worst finite-difference relative error of every tape primitive.
pub fn primitive_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_signed(&mut rng, 4, 3);
    let b = random_signed(&mut rng, 3, 5);
    let same = random_signed(&mut rng, 4, 3);
    let row = random_signed(&mut rng, 1, 3);
    let col = random_signed(&mut rng, 4, 1);
    let positive = random(&mut rng, 4, 3, 0.5, 2.0);
    let members = random_signed(&mut rng, 5, 3);
    let sparse = Arc::new(CsrMatrix::from_triplets(
        4,
        4,
        [(0, 0, 0.5), (0, 2, 1.5), (1, 1, -0.7), (2, 3, 0.3), (3, 0, 2.0), (3, 3, 1.1)],
    )?);
    let member_group = vec![0, 0, 1, 2, 1];
    let plan = Arc::new(ContrastPlan {
        tau: 0.5,
        num_groups: 3,
        denominator: ContrastPlan::full_denominator(&member_group, &[0.25, 0.5, 1.0]),
        member_group,
        anchors: vec![
            Some(AnchorSpec { group: 0, self_member: Some(0) }),
            Some(AnchorSpec { group: 1, self_member: None }),
            None,
            Some(AnchorSpec { group: 2, self_member: Some(4) }),
        ],
    });
    let sparse_targets = vec![Some(2), None, Some(0), Some(1)];
    let sparse_mask = vec![true, true, false, true];
    let dense_targets = vec![Some(2), Some(1), Some(0), Some(1)];

    let cases: Vec<(&'static str, Vec<Matrix>, Box<Build>)> = vec![
        ("matmul", vec![a.clone(), b], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("spmm", vec![a.clone()], Box::new(move |t, v| t.spmm(sparse.clone(), v[0]))),
        ("add", vec![a.clone(), same.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), same.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("hadamard", vec![a.clone(), same.clone()], Box::new(|t, v| t.hadamard(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("add_row", vec![a.clone(), row], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("concat_rows", vec![a.clone(), same], Box::new(|t, v| t.concat_rows(v[0], v[1]))),
        ("row_gather", vec![a.clone()], Box::new(|t, v| t.row_gather(v[0], &[3, 1, 1, 0]))),
        ("row_scatter", vec![a.clone()], Box::new(|t, v| t.row_scatter(v[0], &[5, 0, 2, 6], 7))),
        ("broadcast_col", vec![col], Box::new(|t, v| t.broadcast_col(v[0], 3))),
        ("relu", vec![a.clone()], Box::new(|t, v| t.relu(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|t, v| t.tanh(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![positive], Box::new(|t, v| t.log(v[0]))),
        ("row_l2_normalize", vec![a.clone()], Box::new(|t, v| t.row_l2_normalize(v[0]))),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("reduce_mean", vec![a.clone()], Box::new(|t, v| t.reduce_mean(v[0]))),
        ("logsumexp_row", vec![a.clone()], Box::new(|t, v| t.logsumexp_row(v[0]))),
        (
            "softmax_cross_entropy",
            vec![a.clone()],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &sparse_targets, &sparse_mask)),
        ),
        (
            "weighted_softmax_cross_entropy",
            vec![a.clone()],
            Box::new(move |t, v| t.weighted_softmax_cross_entropy(v[0], &dense_targets, &[true; 4], Some(&[0.5, 2.0, 1.0]))),
        ),
        (
            "cross_entropy_rows",
            vec![a.clone()],
            Box::new(|t, v| {
                let rows = vec![
                    CeRow { row: 0, target: 1, weight: 0.3 },
                    CeRow { row: 3, target: 2, weight: 1.7 },
                ];
                t.cross_entropy_rows(v[0], rows)
            }),
        ),
        ("contrastive", vec![a, members], Box::new(move |t, v| t.contrastive(v[0], v[1], plan.clone()))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| Ok((name, worst_error(&inputs, build.as_ref())?)))
        .collect()
}

/// Twelve nodes in three classes: a ring plus intra-class chords, nine
/// training nodes.
pub fn toy_graph() -> Result<LabeledGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 12;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut feats = random(&mut rng, n, 4, -1.0, 1.0);
    for (i, &c) in labels.iter().enumerate() {
        feats.set(i, c, feats.get(i, c) + 1.0);
    }
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.extend([(0, 3), (3, 6), (1, 4), (4, 7), (2, 5), (5, 8), (9, 0), (10, 1), (11, 2)]);
    let masks = Masks {
        train: (0..n).map(|i| i < 9).collect(),
        val: (0..n).map(|i| (9..11).contains(&i)).collect(),
        test: (0..n).map(|i| i == 11).collect(),
    };
    LabeledGraph::build(&edges, feats, Some(labels.into_iter().map(Some).collect()))?.with_masks(masks)
}

fn objective_value(config: &ModelConfig, params: Vec<Matrix>, g: &LabeledGraph, cfg: &ObjectiveConfig) -> Result<f64> {
    let model = Tail2LearnModel::from_parts(config.clone(), params)?;
    let prepared = PreparedGraph::new(g, config.gcn_variant);
    let mut pass = forward(&model, &prepared, Mode::Eval)?;
    let mask = g.masks().ok_or(crate::Error::NoLabeledNodes)?.train.clone();
    let obj = objective(&mut pass, g.labels(), &mask, g.num_classes(), cfg)?;
    Ok(pass.tape.value(obj.loss).item())
}

/// Worst relative error per parameter of the full objective (cross-entropy
/// plus both contrastive terms) on [`toy_graph`], for both GCN variants.
pub fn toy_objective_errors() -> Result<Vec<(String, f64)>> {
    let g = toy_graph()?;
    let cfg = ObjectiveConfig {
        gamma: 0.5,
        contrast: ContrastConfig {
            tau: 0.5,
            member_cap: None,
            seed: 0,
        },
        class_weights: None,
    };
    let mask = g.masks().ok_or(crate::Error::NoLabeledNodes)?.train.clone();
    let mut out = Vec::new();
    for variant in [GcnVariant::Vanilla, GcnVariant::FirstOrder] {
        let config = ModelConfig {
            hidden: 6,
            task_sizes: vec![3, 2],
            activation: Activation::Tanh,
            dropout: 0.0,
            gcn_variant: variant,
            ..ModelConfig::new(4, 3)
        };
        let model = Tail2LearnModel::init(config.clone(), 11)?;
        let prepared = PreparedGraph::new(&g, variant);
        let mut pass = forward(&model, &prepared, Mode::Eval)?;
        let obj = objective(&mut pass, g.labels(), &mask, 3, &cfg)?;
        if !(obj.report.bcl > 0.0 && obj.report.scl > 0.0) {
            return Err(crate::Error::invalid("toy objective lost a contrastive term"));
        }
        let grads = pass.tape.backward(obj.loss)?;
        for (k, name) in model.param_names().iter().enumerate() {
            let analytic = grads.wrt(&pass.tape, pass.params[k]);
            let numeric = numeric_gradient(&model.params()[k], H, |x| {
                let mut ps = model.params().to_vec();
                ps[k] = x.clone();
                objective_value(&config, ps, &g, &cfg).expect("perturbed objective")
            });
            out.push((format!("{variant:?}/{name}"), max_rel_error(&analytic, &numeric, FLOOR)));
        }
    }
    Ok(out)
}
