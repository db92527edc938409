use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::LabeledGraph;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Stochastic block model with one block per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmSpec {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Class sizes `~ n_max / rank^exponent`, each at least 1.
pub fn zipf_sizes(largest: usize, classes: usize, exponent: f64) -> Vec<usize> {
    (1..=classes)
        .map(|r| ((largest as f64) / (r as f64).powf(exponent)).round().max(1.0) as usize)
        .collect()
}

/// Calls `emit(row, col)` for each successful Bernoulli(p) trial over a
/// `rows` x `row_len(row)` grid, using geometric skips so the cost is linear
/// in the number of successes.
fn sample_pairs(
    rng: &mut ChaCha8Rng,
    p: f64,
    rows: usize,
    row_len: impl Fn(usize) -> usize,
    mut emit: impl FnMut(usize, usize),
) {
    if p <= 0.0 {
        return;
    }
    let log_q = (1.0 - p).ln();
    let (mut r, mut pos) = (0usize, 0usize);
    loop {
        let skip = if p >= 1.0 {
            0
        } else {
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / log_q).floor() as usize
        };
        pos = pos.saturating_add(skip);
        while r < rows && pos >= row_len(r) {
            pos -= row_len(r);
            r += 1;
        }
        if r >= rows {
            return;
        }
        emit(r, pos);
        pos += 1;
    }
}

/// Samples a labeled SBM graph. Nodes are numbered block by block. Features
/// are the unit class mean plus `noise * N(0, 1)` per entry; class means are
/// the standard basis vectors when `dim >= classes`, otherwise random unit
/// vectors.
pub fn synth_longtail_sbm(spec: &SbmSpec) -> Result<LabeledGraph> {
    if !(spec.p_in > spec.p_out && spec.p_out >= 0.0 && spec.p_in <= 1.0) {
        return Err(Error::invalid(format!(
            "need 1 >= p_in > p_out >= 0, got p_in={} p_out={}",
            spec.p_in, spec.p_out
        )));
    }
    if spec.sizes.is_empty() || spec.sizes.contains(&0) {
        return Err(Error::invalid("every class needs at least one node"));
    }
    if spec.dim == 0 || !(spec.noise >= 0.0) {
        return Err(Error::invalid("feature dim must be >= 1 and noise >= 0"));
    }
    let t = spec.sizes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut means = Matrix::zeros(t, spec.dim);
    if spec.dim >= t {
        for c in 0..t {
            means.set(c, c, 1.0);
        }
    } else {
        for c in 0..t {
            let row: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (k, v) in row.into_iter().enumerate() {
                means.set(c, k, v / norm);
            }
        }
    }

    let offsets: Vec<usize> = spec
        .sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let n: usize = spec.sizes.iter().sum();

    let mut edges = Vec::new();
    for a in 0..t {
        let (oa, sa) = (offsets[a], spec.sizes[a]);
        sample_pairs(&mut rng, spec.p_in, sa, |u| sa - u - 1, |u, k| {
            edges.push((oa + u, oa + u + 1 + k));
        });
        for b in a + 1..t {
            let (ob, sb) = (offsets[b], spec.sizes[b]);
            sample_pairs(&mut rng, spec.p_out, sa, |_| sb, |u, v| {
                edges.push((oa + u, ob + v));
            });
        }
    }

    let mut features = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, &s) in spec.sizes.iter().enumerate() {
        for i in offsets[c]..offsets[c] + s {
            for k in 0..spec.dim {
                let eps: f64 = rng.sample(StandardNormal);
                features.set(i, k, means.get(c, k) + spec.noise * eps);
            }
            labels.push(Some(c));
        }
    }
    LabeledGraph::build(&edges, features, Some(labels))?.with_num_classes(t)
}
