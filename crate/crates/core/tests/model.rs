use proptest::prelude::*;

use tail2learn::autodiff::Tape;
use tail2learn::graph::{GcnVariant, LabeledGraph};
use tail2learn::model::{forward, gpool, gunpool, Mode, ModelConfig, PreparedGraph, Tail2LearnModel};
use tail2learn::{CsrMatrix, Matrix};

fn graph_from(n: usize, edges: &[(usize, usize)], feats: Vec<f64>, d: usize, t: usize) -> LabeledGraph {
    let labels = (0..n).map(|i| Some(i % t)).collect();
    LabeledGraph::build(edges, Matrix::from_vec(n, d, feats).unwrap(), Some(labels)).unwrap()
}

fn permuted_csr(a: &CsrMatrix, perm: &[usize]) -> CsrMatrix {
    let mut trips = Vec::new();
    for r in 0..a.rows() {
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            trips.push((perm[r], perm[c], v));
        }
    }
    CsrMatrix::from_triplets(a.rows(), a.cols(), trips).unwrap()
}

/// `perm[i]` is the new position of old row `i`.
fn permuted_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        out.row_mut(perm[i]).copy_from_slice(m.row(i));
    }
    out
}

fn graph_case() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<f64>)> {
    (6usize..14).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0..n, 0..n), n..3 * n),
            prop::collection::vec(-1.0f64..1.0, n * 3),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_shapes_follow_task_sizes((n, edges, feats) in graph_case(), hidden in 2usize..6) {
        let g = graph_from(n, &edges, feats, 3, 3);
        let config = ModelConfig { hidden, task_sizes: vec![3, 2], ..ModelConfig::new(3, 3) };
        let model = Tail2LearnModel::init(config, 1).unwrap();
        let pg = PreparedGraph::new(&g, GcnVariant::Vanilla);
        for mode in [Mode::Eval, Mode::Train { seed: 5 }] {
            let pass = forward(&model, &pg, mode).unwrap();
            let tr = &pass.trace;
            prop_assert_eq!(pass.tape.value(tr.node_embeddings).shape(), (n, hidden));
            prop_assert_eq!(pass.tape.value(tr.levels[0].prototypes).shape(), (3, hidden));
            prop_assert_eq!(pass.tape.value(tr.levels[1].prototypes).shape(), (2, hidden));
            prop_assert_eq!(tr.levels[0].coarse_adjacency.shape(), (3, 3));
            prop_assert_eq!(tr.levels[1].coarse_adjacency.shape(), (2, 2));
            prop_assert_eq!(pass.tape.value(tr.final_embeddings).shape(), (n, hidden));
            prop_assert_eq!(pass.tape.value(tr.logits).shape(), (n, 3));
            prop_assert!(pass.tape.value(tr.logits).all_finite());
        }
    }

    #[test]
    fn gunpool_is_adjoint_of_gather(
        (rows, n) in (1usize..6).prop_flat_map(|k| (Just(k), k..12)),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let idx = &all[..rows];
        let x = Matrix::from_vec(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let up = gunpool(&mut tape, xv, idx, n).unwrap();
        let lhs = tape.value(up).dot(&y);
        let rhs = x.dot(&y.gather_rows(idx));
        prop_assert!((lhs - rhs).abs() < 1e-12);
        for (r, &i) in idx.iter().enumerate() {
            prop_assert_eq!(tape.value(up).row(i), x.row(r));
        }
        let zero_rows = (0..n).filter(|i| !idx.contains(i));
        for i in zero_rows {
            prop_assert!(tape.value(up).row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gpool_is_permutation_equivariant((n, edges, feats) in graph_case(), seed in any::<u64>(), k in 1usize..6) {
        use rand::{seq::SliceRandom, SeedableRng};
        let g = graph_from(n, &edges, feats, 3, 2);
        let z = g.features().clone();
        let adj = g.adjacency();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let p = Matrix::from_rows(&[vec![0.3, -0.8, 0.5]]).unwrap();

        let mut t1 = Tape::new();
        let (zv, pv) = (t1.constant(z.clone()), t1.constant(p.clone()));
        let a = gpool(&mut t1, zv, &adj, pv, k).unwrap();
        let mut t2 = Tape::new();
        let (zv, pv) = (t2.constant(permuted_rows(&z, &perm)), t2.constant(p));
        let b = gpool(&mut t2, zv, &permuted_csr(&adj, &perm), pv, k).unwrap();

        let mapped: Vec<usize> = a.indices.iter().map(|&i| perm[i]).collect();
        prop_assert_eq!(&b.indices, &mapped);
        prop_assert!(t1.value(a.coarse).max_abs_diff(t2.value(b.coarse)) < 1e-14);
        prop_assert!(t1.value(a.gate).max_abs_diff(t2.value(b.gate)) < 1e-14);
        prop_assert!(a.adjacency.to_dense().max_abs_diff(&b.adjacency.to_dense()) == 0.0);
    }

    #[test]
    fn eval_forward_is_deterministic((n, edges, feats) in graph_case(), seed in any::<u64>()) {
        let g = graph_from(n, &edges, feats, 3, 3);
        let config = ModelConfig { hidden: 4, ..ModelConfig::new(3, 3) };
        let model = Tail2LearnModel::init(config, seed).unwrap();
        let pg = PreparedGraph::new(&g, GcnVariant::FirstOrder);
        let a = forward(&model, &pg, Mode::Eval).unwrap();
        let b = forward(&model, &pg, Mode::Eval).unwrap();
        prop_assert_eq!(a.tape.value(a.trace.logits), b.tape.value(b.trace.logits));
        let c = forward(&model, &pg, Mode::Train { seed: 3 }).unwrap();
        let d = forward(&model, &pg, Mode::Train { seed: 3 }).unwrap();
        prop_assert_eq!(c.tape.value(c.trace.logits), d.tape.value(d.trace.logits));
    }
}

#[test]
fn top_level_errors() {
    let g = graph_from(4, &[(0, 1), (1, 2)], vec![0.1; 12], 3, 2);
    let mut tape = Tape::new();
    let z = tape.constant(g.features().clone());
    let p = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap());
    assert!(gpool(&mut tape, z, &g.adjacency(), p, 0).is_err());
    assert!(gpool(&mut tape, z, &g.adjacency(), p, 5).is_err());
    let zero = tape.constant(Matrix::zeros(1, 3));
    assert!(gpool(&mut tape, z, &g.adjacency(), zero, 2).is_err());
    let too_many = ModelConfig { task_sizes: vec![5, 2], ..ModelConfig::new(3, 2) };
    let model = Tail2LearnModel::init(too_many, 0).unwrap();
    assert!(forward(&model, &PreparedGraph::new(&g, GcnVariant::Vanilla), Mode::Eval).is_err());
}
