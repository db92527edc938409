//! Hierarchical encoder: an embedding GCN, a stack of top-k task-grouping
//! layers, a mirrored stack of unpooling layers joined to the grouping side
//! by additive skip connections, and an affine classifier.

mod checkpoint;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{propagation_matrix, GcnVariant, LabeledGraph};
use crate::matrix::{CsrMatrix, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    /// Number of selected nodes per grouping layer; its length is the depth.
    pub task_sizes: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub gcn_variant: GcnVariant,
}

impl ModelConfig {
    /// Two grouping layers with `T` and `ceil(T/2)` tasks (one layer when `T < 2`).
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            hidden: 64,
            task_sizes: Self::default_task_sizes(num_classes),
            activation: Activation::Relu,
            dropout: 0.5,
            gcn_variant: GcnVariant::Vanilla,
        }
    }

    pub fn default_task_sizes(num_classes: usize) -> Vec<usize> {
        if num_classes >= 2 {
            vec![num_classes, num_classes.div_ceil(2)]
        } else {
            vec![num_classes.max(1)]
        }
    }

    pub fn depth(&self) -> usize {
        self.task_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("hidden, input and class dimensions must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.task_sizes.contains(&0) {
            return Err(Error::invalid("task sizes must be >= 1"));
        }
        if self.task_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!(
                "task sizes must strictly decrease: {:?}",
                self.task_sizes
            )));
        }
        Ok(())
    }

    fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if let Some(&k) = self.task_sizes.first() {
            if k > n {
                return Err(Error::invalid(format!("first grouping layer keeps {k} of {n} nodes")));
            }
        }
        Ok(())
    }
}

/// Graph data needed by the forward pass, prepared once per run.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub features: Matrix,
    pub adjacency: CsrMatrix,
    pub propagation: Arc<CsrMatrix>,
    pub variant: GcnVariant,
}

impl PreparedGraph {
    pub fn new(g: &LabeledGraph, variant: GcnVariant) -> Self {
        let adjacency = g.adjacency();
        let propagation = Arc::new(propagation_matrix(&adjacency, variant));
        Self {
            features: g.features().clone(),
            adjacency,
            propagation,
            variant,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Trainable parameters, stored in a fixed order:
/// embedding GCN, per grouping layer (GCN weights, projection row),
/// per unpooling layer GCN weights, classifier weights, classifier bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Tail2LearnModel {
    config: ModelConfig,
    params: Vec<Matrix>,
}

/// Independent seed for stream `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step over (seed, index)
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, seed: u64) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl Tail2LearnModel {
    /// Glorot-uniform weights (projection rows use fan_out = 1), zero bias.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, k, t, depth) = (config.input_dim, config.hidden, config.num_classes, config.depth());
        let mut shapes = vec![(d, k, d, k)];
        for _ in 0..depth {
            shapes.push((k, k, k, k));
            shapes.push((1, k, k, 1));
        }
        for _ in 0..depth {
            shapes.push((k, k, k, k));
        }
        shapes.push((k, t, k, t));
        let mut params: Vec<Matrix> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c, fi, fo))| glorot(r, c, fi, fo, derive_seed(seed, i)))
            .collect();
        params.push(Matrix::zeros(1, t));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Matrix>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter matrices, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (i, (p, r)) in params.iter().zip(&reference.params).enumerate() {
            if p.shape() != r.shape() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    reference.param_names()[i],
                    p.shape(),
                    r.shape()
                )));
            }
            if !p.all_finite() {
                return Err(Error::NonFinite("model parameter"));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let depth = self.config.depth();
        let mut names = vec!["embed.weight".to_string()];
        for l in 0..depth {
            names.push(format!("group{l}.weight"));
            names.push(format!("group{l}.projection"));
        }
        for l in 0..depth {
            names.push(format!("unpool{l}.weight"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    fn idx_group_weight(&self, l: usize) -> usize {
        1 + 2 * l
    }

    fn idx_projection(&self, l: usize) -> usize {
        2 + 2 * l
    }

    fn idx_unpool(&self, l: usize) -> usize {
        1 + 2 * self.config.depth() + l
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from this seed.
    Train { seed: u64 },
}

/// One grouping layer's outputs.
#[derive(Clone, Debug)]
pub struct LevelTrace {
    /// Projection scores of every node at this level, n_l x 1.
    pub scores: Var,
    /// `sigmoid` of the selected scores, k x 1.
    pub gate: Var,
    /// Selected rows in descending score order.
    pub indices: Vec<usize>,
    pub coarse_features: Var,
    pub coarse_adjacency: CsrMatrix,
    /// GCN output on the coarse graph (the next level's embeddings).
    pub prototypes: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub node_embeddings: Var,
    pub levels: Vec<LevelTrace>,
    /// Unpooling outputs before the skip addition, deepest first.
    pub restored: Vec<Var>,
    pub final_embeddings: Var,
    pub logits: Var,
}

impl ForwardTrace {
    /// Embeddings entering grouping layer `l` (0-based): node embeddings for
    /// `l = 0`, otherwise the previous layer's prototypes.
    pub fn level_input(&self, l: usize) -> Var {
        if l == 0 {
            self.node_embeddings
        } else {
            self.levels[l - 1].prototypes
        }
    }
}

pub struct ForwardPass {
    pub tape: Tape,
    /// Tape handles of the model parameters, same order as [`Tail2LearnModel::params`].
    pub params: Vec<Var>,
    pub trace: ForwardTrace,
}

/// `act(prop * x * w)`.
pub fn gcn_forward(
    tape: &mut Tape,
    prop: Arc<CsrMatrix>,
    x: Var,
    w: Var,
    activation: Activation,
) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let h = tape.spmm(prop, xw)?;
    activation.apply(tape, h)
}

/// Output of [`gpool`].
#[derive(Clone, Debug)]
pub struct Pooled {
    pub coarse: Var,
    pub adjacency: CsrMatrix,
    pub indices: Vec<usize>,
    pub gate: Var,
    pub scores: Var,
}

/// Indices of the `k` largest values, largest first, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k task grouping: scores `z p / |p|`, keep the `k` best rows, gate them
/// with `sigmoid(score)`, and take the induced sub-adjacency.
pub fn gpool(tape: &mut Tape, z: Var, adjacency: &CsrMatrix, projection: Var, k: usize) -> Result<Pooled> {
    let (n, width) = tape.value(z).shape();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("gpool: k = {k} outside 1..={n}")));
    }
    let p = tape.value(projection);
    if p.shape() != (1, width) {
        return Err(Error::ShapeMismatch {
            op: "gpool projection",
            left: p.shape(),
            right: (1, width),
        });
    }
    let norm = p.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::invalid("gpool: zero projection vector"));
    }
    let unit = tape.row_l2_normalize(projection)?;
    let column = tape.transpose(unit)?;
    let scores = tape.matmul(z, column)?;
    let indices = top_k(tape.value(scores).as_slice(), k);
    let picked_scores = tape.row_gather(scores, &indices)?;
    let gate = tape.sigmoid(picked_scores)?;
    let picked = tape.row_gather(z, &indices)?;
    let gate_wide = tape.broadcast_col(gate, width)?;
    let coarse = tape.hadamard(picked, gate_wide)?;
    Ok(Pooled {
        coarse,
        adjacency: adjacency.select(&indices),
        indices,
        gate,
        scores,
    })
}

/// Places row `j` of `x` at row `indices[j]` of an `n`-row zero matrix.
pub fn gunpool(tape: &mut Tape, x: Var, indices: &[usize], n: usize) -> Result<Var> {
    tape.row_scatter(x, indices, n)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Option<ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng.as_mut() else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Matrix::from_vec(r, c, mask)?);
    tape.hadamard(x, m)
}

/// Runs the encoder and classifier, recording everything on a fresh tape.
pub fn forward(model: &Tail2LearnModel, graph: &PreparedGraph, mode: Mode) -> Result<ForwardPass> {
    let cfg = &model.config;
    let n = graph.num_nodes();
    cfg.validate_for(n)?;
    if graph.features.cols() != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward features",
            left: graph.features.shape(),
            right: (n, cfg.input_dim),
        });
    }
    let mut rng = match mode {
        Mode::Eval => None,
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };

    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.param(p.clone())).collect();
    let x = tape.constant(graph.features.clone());

    let z1 = gcn_forward(&mut tape, graph.propagation.clone(), x, params[0], cfg.activation)?;
    let z1 = dropout(&mut tape, z1, cfg.dropout, &mut rng)?;

    let mut embeddings = vec![z1];
    let mut adjacencies = vec![graph.adjacency.clone()];
    let mut propagations = vec![graph.propagation.clone()];
    let mut levels = Vec::with_capacity(cfg.depth());
    for (l, &k) in cfg.task_sizes.iter().enumerate() {
        let z = embeddings[l];
        let pooled = gpool(&mut tape, z, &adjacencies[l], params[model.idx_projection(l)], k)?;
        let prop = Arc::new(propagation_matrix(&pooled.adjacency, graph.variant));
        let w = params[model.idx_group_weight(l)];
        let next = gcn_forward(&mut tape, prop.clone(), pooled.coarse, w, cfg.activation)?;
        embeddings.push(next);
        adjacencies.push(pooled.adjacency.clone());
        propagations.push(prop);
        levels.push(LevelTrace {
            scores: pooled.scores,
            gate: pooled.gate,
            indices: pooled.indices,
            coarse_features: pooled.coarse,
            coarse_adjacency: pooled.adjacency,
            prototypes: next,
        });
    }

    let mut current = embeddings[cfg.depth()];
    let mut restored = Vec::with_capacity(cfg.depth());
    for l in (0..cfg.depth()).rev() {
        let rows = tape.value(embeddings[l]).rows();
        let placed = gunpool(&mut tape, current, &levels[l].indices, rows)?;
        let w = params[model.idx_unpool(l)];
        let h = gcn_forward(&mut tape, propagations[l].clone(), placed, w, cfg.activation)?;
        restored.push(h);
        current = tape.add(h, embeddings[l])?;
    }

    let final_embeddings = dropout(&mut tape, current, cfg.dropout, &mut rng)?;
    let n_params = params.len();
    let scores = tape.matmul(final_embeddings, params[n_params - 2])?;
    let logits = tape.add_row(scores, params[n_params - 1])?;

    Ok(ForwardPass {
        tape,
        params,
        trace: ForwardTrace {
            node_embeddings: z1,
            levels,
            restored,
            final_embeddings: current,
            logits,
        },
    })
}

/// Argmax of each row (ties to the lower class).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode class predictions for every node.
pub fn predict(model: &Tail2LearnModel, graph: &PreparedGraph) -> Result<Vec<usize>> {
    let pass = forward(model, graph, Mode::Eval)?;
    Ok(argmax_rows(pass.tape.value(pass.trace.logits)))
}
