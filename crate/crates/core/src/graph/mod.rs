//! Attributed graphs with partial labels, propagation matrices, long-tail
//! statistics, splitting, down-sampling, and synthetic generation.

mod downsample;
pub mod io;
mod split;
mod stats;
mod synth;

pub use downsample::downsample_classes;
pub use split::{sample_splits, SplitSpec};
pub use stats::{class_histogram, head_quantile, imbalance_ratio, long_tailedness_ratio, ClassHistogram};
pub use synth::{synth_longtail_sbm, zipf_sizes, SbmSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{CsrMatrix, Matrix};

/// Train/validation/test node masks. Pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn count(mask: &[bool]) -> usize {
        mask.iter().filter(|&&m| m).count()
    }
}

/// Propagation matrix used by GCN layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GcnVariant {
    /// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
    #[default]
    Vanilla,
    /// `I + D^-1/2 A D^-1/2` with `D` the degree matrix of `A`.
    FirstOrder,
}

/// Undirected attributed graph with optional per-node labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    masks: Option<Masks>,
}

impl LabeledGraph {
    /// Builds a graph with `features.rows()` nodes. Edges are deduplicated,
    /// stored once as `(i, j)` with `i < j`, and self-loops are dropped.
    /// The class count is `1 + max label` (0 when nothing is labeled).
    pub fn build(
        edge_list: &[(usize, usize)],
        features: Matrix,
        labels: Option<Vec<Option<usize>>>,
    ) -> Result<Self> {
        let n = features.rows();
        let labels = labels.unwrap_or_else(|| vec![None; n]);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "build_graph labels",
                left: (n, features.cols()),
                right: (labels.len(), 1),
            });
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("build_graph features"));
        }
        let mut edges = Vec::with_capacity(edge_list.len());
        for &(a, b) in edge_list {
            for x in [a, b] {
                if x >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "edge endpoint",
                        index: x,
                        bound: n,
                    });
                }
            }
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let num_classes = labels.iter().flatten().max().map_or(0, |&m| m + 1);
        Ok(Self {
            n,
            edges,
            features,
            labels,
            num_classes,
            masks: None,
        })
    }

    /// Overrides the inferred class count.
    pub fn with_num_classes(mut self, t: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().flatten().find(|&&l| l >= t) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: bad,
                bound: t,
            });
        }
        self.num_classes = t;
        Ok(self)
    }

    /// Attaches masks. They must be disjoint, only cover labeled nodes, and
    /// give every class at least one training node.
    pub fn with_masks(mut self, masks: Masks) -> Result<Self> {
        for m in [&masks.train, &masks.val, &masks.test] {
            if m.len() != self.n {
                return Err(Error::ShapeMismatch {
                    op: "masks",
                    left: (self.n, 1),
                    right: (m.len(), 1),
                });
            }
        }
        let mut train_per_class = vec![0usize; self.num_classes];
        for i in 0..self.n {
            let hits = [masks.train[i], masks.val[i], masks.test[i]]
                .iter()
                .filter(|&&b| b)
                .count();
            if hits > 1 {
                return Err(Error::invalid(format!("node {i} is in more than one mask")));
            }
            if hits == 1 && self.labels[i].is_none() {
                return Err(Error::invalid(format!("masked node {i} is unlabeled")));
            }
            if masks.train[i] {
                if let Some(c) = self.labels[i] {
                    train_per_class[c] += 1;
                }
            }
        }
        if let Some(c) = train_per_class.iter().position(|&k| k == 0) {
            return Err(Error::ClassTooSmall {
                class: c,
                available: 0,
                required: 1,
            });
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn masks(&self) -> Option<&Masks> {
        self.masks.as_ref()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> CsrMatrix {
        let trips = self
            .edges
            .iter()
            .flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)]);
        CsrMatrix::from_triplets(self.n, self.n, trips).expect("edges validated at build")
    }

    /// Labels restricted to the training mask; everything else is `None`.
    pub fn train_labels(&self) -> Vec<Option<usize>> {
        match &self.masks {
            Some(m) => self
                .labels
                .iter()
                .zip(&m.train)
                .map(|(&l, &t)| if t { l } else { None })
                .collect(),
            None => vec![None; self.n],
        }
    }

    /// Keeps the nodes flagged in `keep`, reindexing them in order. Masks are
    /// dropped; the class count is preserved.
    pub fn retain_nodes(&self, keep: &[bool]) -> Result<LabeledGraph> {
        let mut new_id = vec![usize::MAX; self.n];
        let mut kept = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                new_id[i] = kept.len();
                kept.push(i);
            }
        }
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|&&(a, b)| keep[a] && keep[b])
            .map(|&(a, b)| (new_id[a], new_id[b]))
            .collect();
        let features = self.features.gather_rows(&kept);
        let labels = kept.iter().map(|&i| self.labels[i]).collect();
        LabeledGraph::build(&edges, features, Some(labels))?.with_num_classes(self.num_classes)
    }

    /// Copy of this graph with masks replaced (unchecked).
    pub(crate) fn set_masks_unchecked(mut self, masks: Option<Masks>) -> Self {
        self.masks = masks;
        self
    }
}

/// Propagation matrix `D^-1/2 (A + I) D^-1/2` of the graph.
pub fn normalized_adjacency(g: &LabeledGraph) -> CsrMatrix {
    propagation_matrix(&g.adjacency(), GcnVariant::Vanilla)
}

/// Propagation matrix for a 0/1 adjacency without self-loops.
pub fn propagation_matrix(adj: &CsrMatrix, variant: GcnVariant) -> CsrMatrix {
    let n = adj.rows();
    let deg: Vec<f64> = (0..n).map(|r| adj.row(r).1.iter().sum()).collect();
    let mut trips = Vec::with_capacity(adj.nnz() + n);
    match variant {
        GcnVariant::Vanilla => {
            let inv: Vec<f64> = deg.iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
            for r in 0..n {
                trips.push((r, r, inv[r] * inv[r]));
                let (cols, vals) = adj.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    trips.push((r, c, v * inv[r] * inv[c]));
                }
            }
        }
        GcnVariant::FirstOrder => {
            let inv: Vec<f64> = deg
                .iter()
                .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
                .collect();
            for r in 0..n {
                trips.push((r, r, 1.0));
                let (cols, vals) = adj.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    trips.push((r, c, v * inv[r] * inv[c]));
                }
            }
        }
    }
    CsrMatrix::from_triplets(n, n, trips).expect("square")
}
