//! Adam, the training loop with early stopping, and the classical baselines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{metrics, ConfusionMatrix, Metrics};
use crate::graph::{class_histogram, head_quantile, GcnVariant, LabeledGraph, Masks};
use crate::losses::{objective, ContrastConfig, LossReport, ObjectiveConfig};
use crate::matrix::Matrix;
use crate::model::{argmax_rows, derive_seed, forward, Activation, Mode, ModelConfig, PreparedGraph, Tail2LearnModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub gamma: f64,
    pub tau: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Tasks per grouping layer; `None` picks `[T, ceil(T/2)]`.
    pub task_sizes: Option<Vec<usize>>,
    pub activation: Activation,
    pub dropout: f64,
    pub gcn_variant: GcnVariant,
    /// See [`ContrastConfig::member_cap`].
    pub contrast_member_cap: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 10_000,
            patience: 1000,
            gamma: 0.01,
            tau: 0.1,
            seed: 0,
            hidden: 64,
            task_sizes: None,
            activation: Activation::Relu,
            dropout: 0.5,
            gcn_variant: GcnVariant::Vanilla,
            contrast_member_cap: Some(256),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.max_epochs == 0 || self.patience > self.max_epochs {
            return bad(format!(
                "need 1 <= max_epochs and patience <= max_epochs, got {} / {}",
                self.max_epochs, self.patience
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            num_classes,
            hidden: self.hidden,
            task_sizes: self
                .task_sizes
                .clone()
                .unwrap_or_else(|| ModelConfig::default_task_sizes(num_classes)),
            activation: self.activation,
            dropout: self.dropout,
            gcn_variant: self.gcn_variant,
        }
    }

    /// Same settings with no grouping layers and no contrastive terms.
    pub fn origin(&self) -> Self {
        Self {
            task_sizes: Some(Vec::new()),
            gamma: 0.0,
            ..self.clone()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with weight decay added to the gradient.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: (params.len(), state.m.len()),
            right: (grads.len(), 1),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (k, (w, &gk)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            let gk = gk + cfg.weight_decay * *w;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub report: LossReport,
    /// `None` when the split has no labeled node.
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot.
    pub model: Tail2LearnModel,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Graph the model was trained on; differs from the input only for
    /// oversampling, whose extra nodes follow the original ones.
    pub graph: LabeledGraph,
    /// Leading nodes of `graph` that belong to the input graph.
    pub original_nodes: usize,
}

impl TrainOutcome {
    pub fn best_log(&self) -> &EpochLog {
        self.logs.iter().find(|l| l.epoch == self.best_epoch).expect("best epoch logged")
    }
}

const DROPOUT_STREAM: usize = 1 << 20;
const CONTRAST_STREAM: usize = 1 << 21;

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged(epoch),
        other => other,
    }
}

fn split_metrics(labels: &[Option<usize>], pred: &[usize], mask: &[bool], t: usize) -> Result<Option<Metrics>> {
    let cm = ConfusionMatrix::from_predictions(labels, pred, Some(mask), t)?;
    if cm.total() == 0 {
        return Ok(None);
    }
    metrics(&cm).map(Some)
}

fn run(g: &LabeledGraph, cfg: &TrainConfig, class_weights: Option<Vec<f64>>, original_nodes: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let masks = g.masks().ok_or(Error::NoLabeledNodes)?.clone();
    let t = g.num_classes();
    let mut model = Tail2LearnModel::init(cfg.model_config(g.feature_dim(), t), cfg.seed)?;
    let prepared = PreparedGraph::new(g, cfg.gcn_variant);
    let restrict = |m: &[bool]| -> Vec<bool> { m.iter().enumerate().map(|(i, &b)| b && i < original_nodes).collect() };
    let eval_masks = [restrict(&masks.train), restrict(&masks.val), restrict(&masks.test)];
    let select_on_val = Masks::count(&eval_masks[1]) > 0;

    let mut adam = AdamState::new(model.params());
    let adam_cfg = cfg.adam();
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, Tail2LearnModel)> = None;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let on_err = diverged(epoch);
        let mode = Mode::Train {
            seed: derive_seed(derive_seed(cfg.seed, DROPOUT_STREAM), epoch),
        };
        let mut pass = forward(&model, &prepared, mode).map_err(&on_err)?;
        let obj_cfg = ObjectiveConfig {
            gamma: cfg.gamma,
            contrast: ContrastConfig {
                tau: cfg.tau,
                member_cap: cfg.contrast_member_cap,
                seed: derive_seed(derive_seed(cfg.seed, CONTRAST_STREAM), epoch),
            },
            class_weights: class_weights.clone(),
        };
        let obj = objective(&mut pass, g.labels(), &masks.train, t, &obj_cfg).map_err(&on_err)?;
        let grads = pass.tape.backward(obj.loss).map_err(&on_err)?;
        let grads: Vec<Matrix> = pass.params.iter().map(|&v| grads.wrt(&pass.tape, v)).collect();
        drop(pass);

        let eval = forward(&model, &prepared, Mode::Eval).map_err(&on_err)?;
        let pred = argmax_rows(eval.tape.value(eval.trace.logits));
        drop(eval);
        let [train_m, val_m, test_m] = [0, 1, 2].map(|k| split_metrics(g.labels(), &pred, &eval_masks[k], t));
        let (train_m, val_m, test_m) = (train_m?, val_m?, test_m?);

        let score = if select_on_val { &val_m } else { &train_m }
            .as_ref()
            .map_or(0.0, |m| m.bacc);
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((epoch, score, model.clone()));
        }

        adam_step(model.params_mut(), &grads, &mut adam, &adam_cfg)?;
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged(epoch));
        }
        logs.push(EpochLog {
            epoch,
            report: obj.report,
            train: train_m,
            val: val_m,
            test: test_m,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let best_epoch = best.as_ref().expect("set above").0;
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_epoch, _, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        logs,
        best_epoch,
        graph: g.clone(),
        original_nodes,
    })
}

/// Trains the full model.
pub fn train(g: &LabeledGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(g, cfg, None, g.num_nodes())
}

/// GCN encoder plus affine classifier, cross-entropy only.
pub fn baseline_origin(g: &LabeledGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(g, &cfg.origin(), None, g.num_nodes())
}

/// `w_t = n / (T n_t)` over the training histogram, scaled to mean 1.
pub fn class_weights(g: &LabeledGraph) -> Result<Vec<f64>> {
    let masks = g.masks().ok_or(Error::NoLabeledNodes)?;
    let mut counts = vec![0usize; g.num_classes()];
    for (l, &m) in g.labels().iter().zip(&masks.train) {
        if let (Some(c), true) = (l, m) {
            counts[*c] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let t = counts.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (t * c as f64) })
        .collect();
    let mean = raw.iter().sum::<f64>() / t;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Origin with class-reweighted cross-entropy.
pub fn baseline_reweight(g: &LabeledGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(g, &cfg.origin(), Some(class_weights(g)?), g.num_nodes())
}

/// Classes ranked after `Q(0.8)` of the training histogram; the smaller half
/// when that quantile covers every class.
pub fn tail_classes(g: &LabeledGraph) -> Result<Vec<usize>> {
    let masks = g.masks().ok_or(Error::NoLabeledNodes)?;
    let hist = class_histogram(g, Some(&masks.train))?;
    let t = hist.num_classes();
    let q = head_quantile(&hist, 0.8)?;
    let head = if q >= t { t - t / 2 } else { q };
    Ok(hist.classes()[head..].to_vec())
}

/// Appends `round(scale * n_c)` duplicates of the training nodes of every
/// tail class `c`, cycling through them in id order. A duplicate copies the
/// source's features, label, neighbors and train membership.
pub fn oversample_graph(g: &LabeledGraph, scale: f64) -> Result<LabeledGraph> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("oversampling scale must be >= 0, got {scale}")));
    }
    let masks = g.masks().ok_or(Error::NoLabeledNodes)?;
    let mut sources = Vec::new();
    for c in tail_classes(g)? {
        let nodes: Vec<usize> = (0..g.num_nodes())
            .filter(|&i| masks.train[i] && g.labels()[i] == Some(c))
            .collect();
        let extra = (scale * nodes.len() as f64).round() as usize;
        sources.extend((0..extra).map(|k| nodes[k % nodes.len()]));
    }
    sources.sort_unstable();
    let n = g.num_nodes();
    let neighbors = g.neighbors();
    let mut edges = g.edges().to_vec();
    let x = g.features();
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let mut labels = g.labels().to_vec();
    let mut new_masks = masks.clone();
    for (j, &s) in sources.iter().enumerate() {
        let id = n + j;
        edges.extend(neighbors[s].iter().map(|&u| (u, id)));
        rows.push(x.row(s).to_vec());
        labels.push(g.labels()[s]);
        new_masks.train.push(true);
        new_masks.val.push(false);
        new_masks.test.push(false);
    }
    let features = if rows.is_empty() {
        Matrix::zeros(0, x.cols())
    } else {
        Matrix::from_rows(&rows)?
    };
    LabeledGraph::build(&edges, features, Some(labels))?
        .with_num_classes(g.num_classes())?
        .with_masks(new_masks)
}

/// Origin trained on the oversampled graph; metrics cover original nodes only.
pub fn baseline_oversample(g: &LabeledGraph, cfg: &TrainConfig, scale: f64) -> Result<TrainOutcome> {
    let augmented = oversample_graph(g, scale)?;
    run(&augmented, &cfg.origin(), None, g.num_nodes())
}
