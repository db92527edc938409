//! One function per subcommand. Each returns its results and writes its
//! files; printing is left to the binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tail2learn::eval::{bound_ledger, metrics, per_class_accuracy, ConfusionMatrix, Metrics};
use tail2learn::graph::io::{load_dataset, write_dataset, DatasetPaths};
use tail2learn::graph::{
    class_histogram, downsample_classes, imbalance_ratio, long_tailedness_ratio, sample_splits, synth_longtail_sbm,
    LabeledGraph, SbmSpec,
};
use tail2learn::losses::{objective, ContrastConfig, ObjectiveConfig};
use tail2learn::model::{argmax_rows, forward, load_checkpoint, save_checkpoint, Mode, PreparedGraph, Tail2LearnModel};
use tail2learn::training::{baseline_origin, baseline_oversample, baseline_reweight, train, TrainOutcome};

use crate::config::{RunConfig, Source, BENCHMARK_SIZES};
use crate::error::{CliError, Result};
use crate::output::{self, metric_values, METRIC_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Origin,
    Reweight,
    Oversample,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Origin => "origin",
            Baseline::Reweight => "reweight",
            Baseline::Oversample => "oversample",
        }
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "origin" => Ok(Baseline::Origin),
            "reweight" => Ok(Baseline::Reweight),
            "oversample" => Ok(Baseline::Oversample),
            other => Err(format!("unknown baseline {other:?} (origin|reweight|oversample)")),
        }
    }
}

/// Builds the graph a config describes, splitting it if it carries no masks.
pub fn load_graph(cfg: &RunConfig) -> Result<LabeledGraph> {
    let g = match cfg.source()? {
        Source::Files(paths) => load_dataset(&paths)?,
        Source::Synthetic(spec) => {
            let g = synth_longtail_sbm(&spec)?;
            match cfg.target_ratio {
                Some(r) => downsample_classes(&g, r, 0.8)?,
                None => g,
            }
        }
    };
    if g.masks().is_some() {
        Ok(g)
    } else {
        Ok(sample_splits(&g, &cfg.split_spec())?)
    }
}

/// Label statistics of one node scope.
#[derive(Clone, Debug, PartialEq)]
pub struct ScopeStats {
    pub scope: &'static str,
    /// `(class, count)`, largest first.
    pub histogram: Vec<(usize, usize)>,
    pub imbalance: f64,
    /// `(p, Ratio_LT(p))`; `None` when the quantile covers every class.
    pub ratios: Vec<(f64, Option<f64>)>,
}

fn scope_stats(g: &LabeledGraph, mask: Option<&[bool]>, scope: &'static str, ps: &[f64]) -> Result<ScopeStats> {
    let h = class_histogram(g, mask)?;
    let mut ratios = Vec::new();
    for &p in ps {
        match long_tailedness_ratio(&h, p) {
            Ok(r) => ratios.push((p, Some(r))),
            Err(tail2learn::Error::DegenerateQuantile(_)) => ratios.push((p, None)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ScopeStats {
        scope,
        histogram: h.classes().iter().copied().zip(h.counts().iter().copied()).collect(),
        imbalance: imbalance_ratio(&h),
        ratios,
    })
}

/// Statistics of the full label set and, when masks exist, the train split.
pub fn graph_stats(g: &LabeledGraph, ps: &[f64]) -> Result<Vec<ScopeStats>> {
    let mut out = vec![scope_stats(g, None, "all", ps)?];
    if let Some(m) = g.masks() {
        out.push(scope_stats(g, Some(&m.train), "train", ps)?);
    }
    Ok(out)
}

pub fn format_stats(stats: &[ScopeStats]) -> String {
    let mut s = String::new();
    for st in stats {
        let hist: Vec<String> = st.histogram.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        writeln!(s, "[{}] histogram {}", st.scope, hist.join(" ")).unwrap();
        writeln!(s, "[{}] imbalance_ratio {}", st.scope, st.imbalance).unwrap();
        for (p, r) in &st.ratios {
            let v = r.map_or("degenerate".to_string(), |r| r.to_string());
            writeln!(s, "[{}] ratio_lt({p}) {v}", st.scope).unwrap();
        }
    }
    s
}

fn write_stats_csv(path: &Path, stats: &[ScopeStats]) -> Result<()> {
    let mut rows = Vec::new();
    for st in stats {
        for (c, n) in &st.histogram {
            rows.push(vec![st.scope.into(), "class_count".into(), c.to_string(), n.to_string()]);
        }
        rows.push(vec![st.scope.into(), "imbalance_ratio".into(), String::new(), st.imbalance.to_string()]);
        for (p, r) in &st.ratios {
            rows.push(vec![st.scope.into(), "ratio_lt".into(), p.to_string(), r.map(|v| v.to_string()).unwrap_or_default()]);
        }
    }
    let header: Vec<String> = ["scope", "stat", "key", "value"].map(String::from).to_vec();
    output::write_rows(path, &header, &rows)
}

/// Writes the synthetic dataset files into `dir`.
pub fn cmd_gen(cfg: &RunConfig, dir: &Path) -> Result<(DatasetPaths, Vec<ScopeStats>)> {
    if !matches!(cfg.source()?, Source::Synthetic(_)) {
        return Err(CliError::Config("gen needs synthetic `sizes`".into()));
    }
    let g = load_graph(cfg)?;
    let paths = write_dataset(dir, &g)?;
    let stats = graph_stats(&g, &[0.8])?;
    Ok((paths, stats))
}

/// Label statistics of a dataset; also written to `out` as CSV if given.
pub fn cmd_stats(paths: &DatasetPaths, ps: &[f64], out: Option<&Path>) -> Result<Vec<ScopeStats>> {
    let g = load_dataset(paths)?;
    let stats = graph_stats(&g, ps)?;
    if let Some(p) = out {
        write_stats_csv(p, &stats)?;
    }
    Ok(stats)
}

/// Runs the full model or the named baseline on `g`.
pub fn fit(g: &LabeledGraph, cfg: &RunConfig, baseline: Option<Baseline>) -> Result<TrainOutcome> {
    let tc = cfg.train_config();
    Ok(match baseline {
        None => train(g, &tc)?,
        Some(Baseline::Origin) => baseline_origin(g, &tc)?,
        Some(Baseline::Reweight) => baseline_reweight(g, &tc)?,
        Some(Baseline::Oversample) => baseline_oversample(g, &tc, cfg.oversample_scale)?,
    })
}

/// Eval-mode results of a trained model on the original nodes.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub test_recall: Vec<Option<f64>>,
}

fn split_metrics(g: &LabeledGraph, pred: &[usize], mask: &[bool]) -> Result<(Option<Metrics>, ConfusionMatrix)> {
    let cm = ConfusionMatrix::from_predictions(g.labels(), pred, Some(mask), g.num_classes())?;
    let m = if cm.total() == 0 { None } else { Some(metrics(&cm)?) };
    Ok((m, cm))
}

/// Evaluates `model` on `trained_on` and scores the first `original.num_nodes()`
/// nodes against `original`'s labels and masks.
pub fn evaluate(model: &Tail2LearnModel, trained_on: &LabeledGraph, original: &LabeledGraph) -> Result<Evaluation> {
    let prepared = PreparedGraph::new(trained_on, model.config().gcn_variant);
    let pass = forward(model, &prepared, Mode::Eval)?;
    let mut predictions = argmax_rows(pass.tape.value(pass.trace.logits));
    predictions.truncate(original.num_nodes());
    let masks = original.masks().ok_or(tail2learn::Error::NoLabeledNodes)?;
    let (train, _) = split_metrics(original, &predictions, &masks.train)?;
    let (val, _) = split_metrics(original, &predictions, &masks.val)?;
    let (test, cm) = split_metrics(original, &predictions, &masks.test)?;
    Ok(Evaluation {
        predictions,
        train,
        val,
        test,
        test_recall: per_class_accuracy(&cm),
    })
}

fn class_counts(g: &LabeledGraph, mask: &[bool]) -> Vec<usize> {
    let mut c = vec![0; g.num_classes()];
    for (l, &m) in g.labels().iter().zip(mask) {
        if let (Some(k), true) = (l, m) {
            c[*k] += 1;
        }
    }
    c
}

#[derive(Debug)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";

/// Trains into `out/<config hash>` and writes every run artifact.
pub fn cmd_train(cfg: &RunConfig, baseline: Option<Baseline>, force: bool) -> Result<TrainRun> {
    cfg.validate()?;
    let tag = baseline.map_or("tail2learn", Baseline::name);
    let dir = cfg.out.join(cfg.hash(tag));
    if dir.exists() && !force {
        return Err(CliError::Exists(dir));
    }
    std::fs::create_dir_all(&dir)?;
    let pretty = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(dir.join(CONFIG_FILE), pretty + "\n")?;

    let g = load_graph(cfg)?;
    let outcome = fit(&g, cfg, baseline)?;
    let evaluation = evaluate(&outcome.model, &outcome.graph, &g)?;

    let t = g.num_classes();
    output::write_log(&dir.join(LOG_FILE), &outcome.logs, t)?;
    save_checkpoint(&outcome.model, &dir.join(CHECKPOINT_FILE))?;
    output::write_metrics(
        &dir.join("metrics.csv"),
        &[
            ("train", evaluation.train.as_ref()),
            ("val", evaluation.val.as_ref()),
            ("test", evaluation.test.as_ref()),
        ],
    )?;
    let masks = g.masks().expect("split");
    output::write_per_class(
        &dir.join("per_class.csv"),
        &class_counts(&g, &masks.train),
        &class_counts(&g, &masks.test),
        &evaluation.test_recall,
    )?;

    let prepared = PreparedGraph::new(&outcome.graph, outcome.model.config().gcn_variant);
    let mut pass = forward(&outcome.model, &prepared, Mode::Eval)?;
    let tc = cfg.train_config();
    let obj_cfg = ObjectiveConfig {
        gamma: tc.gamma,
        contrast: ContrastConfig {
            tau: tc.tau,
            member_cap: tc.contrast_member_cap,
            seed: tc.seed,
        },
        class_weights: None,
    };
    let train_mask = outcome.graph.masks().expect("split").train.clone();
    let obj = objective(&mut pass, outcome.graph.labels(), &train_mask, t, &obj_cfg)?;
    let ledger = bound_ledger(&pass.tape, &pass.trace, &obj.report, &outcome.graph)?;
    output::write_bound_ledger(&dir.join("bound_ledger.csv"), &ledger)?;
    output::write_predictions(&dir.join("predictions.tsv"), &evaluation.predictions)?;
    Ok(TrainRun { dir, outcome, evaluation })
}

/// Scores a saved checkpoint on the graph a config describes.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Evaluation> {
    let model = load_checkpoint(checkpoint)?;
    let g = load_graph(cfg)?;
    evaluate(&model, &g, &g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub m1: bool,
    pub m2: bool,
    pub ce: bool,
    /// Mean test metrics over seeds: bAcc, Macro-F1, G-Means, Acc.
    pub mean: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub seed: u64,
    pub variant: &'static str,
    pub test: [f64; 4],
    /// Mean test recall of the two smallest classes.
    pub tail_recall: f64,
    pub loss_range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [("full", true, true), ("m1_ce", true, false), ("ce_only", false, false)];

/// Two smallest classes by labeled count, ties to the higher id.
fn smallest_two(g: &LabeledGraph) -> Result<Vec<usize>> {
    let h = class_histogram(g, None)?;
    Ok(h.classes().iter().rev().take(2).copied().collect())
}

/// Full model, encoder without contrastive terms, and cross-entropy only,
/// over `seeds` consecutive seeds starting at `cfg.seed`.
pub fn cmd_ablate(cfg: &RunConfig, seeds: u64, out: Option<&Path>) -> Result<Ablation> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for s in 0..seeds {
        let cs = RunConfig {
            seed: cfg.seed + s,
            ..cfg.clone()
        };
        let g = load_graph(&cs)?;
        let tails = smallest_two(&g)?;
        for (variant, m1, m2) in ABLATION_VARIANTS {
            let vc = RunConfig {
                gamma: if m2 { cs.gamma } else { 0.0 },
                ..cs.clone()
            };
            let outcome = fit(&g, &vc, (!m1).then_some(Baseline::Origin))?;
            let ev = evaluate(&outcome.model, &outcome.graph, &g)?;
            let test = ev.test.as_ref().ok_or(tail2learn::Error::Empty("test split"))?;
            let tail_recall = tails.iter().map(|&c| ev.test_recall[c].unwrap_or(0.0)).sum::<f64>() / tails.len() as f64;
            cells.push(AblationCell {
                seed: cs.seed,
                variant,
                test: metric_values(test),
                tail_recall,
                loss_range: outcome.best_log().report.loss_range(),
            });
        }
    }
    let rows = ABLATION_VARIANTS
        .iter()
        .map(|&(variant, m1, m2)| {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == variant).collect();
            let mut mean = [0.0; 4];
            for c in &mine {
                for (m, v) in mean.iter_mut().zip(c.test) {
                    *m += v / mine.len() as f64;
                }
            }
            AblationRow {
                variant,
                m1,
                m2,
                ce: true,
                mean,
            }
        })
        .collect();
    let ab = Ablation { rows, cells };
    if let Some(dir) = out {
        write_ablation(dir, &ab)?;
    }
    Ok(ab)
}

fn write_ablation(dir: &Path, ab: &Ablation) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut header: Vec<String> = ["variant", "m1", "m2", "l_ce"].map(String::from).to_vec();
    header.extend(METRIC_NAMES.map(String::from));
    let rows: Vec<Vec<String>> = ab
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.variant.to_string(), r.m1.to_string(), r.m2.to_string(), r.ce.to_string()];
            v.extend(r.mean.iter().map(f64::to_string));
            v
        })
        .collect();
    output::write_rows(&dir.join("ablation.csv"), &header, &rows)?;

    let mut header: Vec<String> = ["seed", "variant"].map(String::from).to_vec();
    header.extend(METRIC_NAMES.map(String::from));
    header.extend(["tail_recall", "loss_range"].map(String::from));
    let rows: Vec<Vec<String>> = ab
        .cells
        .iter()
        .map(|c| {
            let mut v = vec![c.seed.to_string(), c.variant.to_string()];
            v.extend(c.test.iter().map(f64::to_string));
            v.push(c.tail_recall.to_string());
            v.push(c.loss_range.to_string());
            v
        })
        .collect();
    output::write_rows(&dir.join("ablation_seeds.csv"), &header, &rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub tau: f64,
    pub test: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Max minus min test bAcc over the grid.
    pub bacc_spread: f64,
}

/// Full model over the `gammas x taus` grid, all cells sharing `cfg.seed`.
pub fn cmd_sweep(cfg: &RunConfig, gammas: &[f64], taus: &[f64], out: Option<&Path>) -> Result<Sweep> {
    cfg.validate()?;
    if gammas.is_empty() || taus.is_empty() {
        return Err(CliError::Config("sweep needs at least one gamma and one tau".into()));
    }
    let g = load_graph(cfg)?;
    let mut rows = Vec::new();
    for &gamma in gammas {
        for &tau in taus {
            let cell = RunConfig { gamma, tau, ..cfg.clone() };
            cell.train_config().validate()?;
            let outcome = fit(&g, &cell, None)?;
            let ev = evaluate(&outcome.model, &outcome.graph, &g)?;
            let test = ev.test.as_ref().ok_or(tail2learn::Error::Empty("test split"))?;
            rows.push(SweepRow {
                gamma,
                tau,
                test: metric_values(test),
            });
        }
    }
    let max = rows.iter().map(|r| r.test[0]).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.test[0]).fold(f64::INFINITY, f64::min);
    let sweep = Sweep {
        rows,
        bacc_spread: max - min,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut header: Vec<String> = ["gamma", "tau"].map(String::from).to_vec();
        header.extend(METRIC_NAMES.map(String::from));
        let body: Vec<Vec<String>> = sweep
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![r.gamma.to_string(), r.tau.to_string()];
                v.extend(r.test.iter().map(f64::to_string));
                v
            })
            .collect();
        output::write_rows(&dir.join("sweep.csv"), &header, &body)?;
    }
    Ok(sweep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: &'static str,
    pub nodes: usize,
    pub edges: usize,
    pub ms_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bench {
    pub rows: Vec<BenchRow>,
    /// `(model, least-squares slope of log time on log n)`; `None` below two sizes.
    pub slopes: Vec<(&'static str, Option<f64>)>,
}

pub const DEFAULT_BENCH_SIZES: [usize; 6] = [1000, 2000, 5000, 10_000, 20_000, 30_000];

/// Benchmark-shaped block model with `n` nodes and the benchmark's
/// expected degrees.
pub fn bench_graph_spec(cfg: &RunConfig, n: usize) -> SbmSpec {
    let base: usize = BENCHMARK_SIZES.iter().sum();
    let mut sizes: Vec<usize> = BENCHMARK_SIZES
        .iter()
        .map(|&s| ((s * n) as f64 / base as f64).round().max(1.0) as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    sizes[0] = (sizes[0] + n).saturating_sub(assigned).max(1);
    let scale = base as f64 / n as f64;
    SbmSpec {
        sizes,
        dim: cfg.dim,
        p_in: (cfg.p_in * scale).min(1.0),
        p_out: (cfg.p_out * scale).min(cfg.p_in * scale * 0.999),
        noise: cfg.noise,
        seed: cfg.graph_seed.unwrap_or(cfg.seed),
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Mean wall time per epoch over `epochs` epochs for the full model and
/// for the cross-entropy baseline, one graph per size.
pub fn cmd_bench(cfg: &RunConfig, sizes: &[usize], epochs: usize, out: Option<&Path>) -> Result<Bench> {
    if sizes.is_empty() || epochs == 0 {
        return Err(CliError::Config("bench needs sizes and at least one epoch".into()));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        let spec = bench_graph_spec(cfg, n);
        let g = sample_splits(&synth_longtail_sbm(&spec)?, &cfg.split_spec())?;
        let bc = RunConfig {
            max_epochs: epochs,
            patience: epochs,
            ..cfg.clone()
        };
        for (model, baseline) in [("tail2learn", None), ("origin", Some(Baseline::Origin))] {
            let outcome = fit(&g, &bc, baseline)?;
            let ms = outcome.logs.iter().map(|l| l.wall_ms).sum::<f64>() / outcome.logs.len() as f64;
            rows.push(BenchRow {
                model,
                nodes: g.num_nodes(),
                edges: g.num_edges(),
                ms_per_epoch: ms,
            });
        }
    }
    let slopes = ["tail2learn", "origin"]
        .into_iter()
        .map(|m| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.model == m)
                .map(|r| (r.nodes as f64, r.ms_per_epoch))
                .collect();
            (m, log_log_slope(&pts))
        })
        .collect();
    let bench = Bench { rows, slopes };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let header: Vec<String> = ["model", "nodes", "edges", "ms_per_epoch"].map(String::from).to_vec();
        let body: Vec<Vec<String>> = bench
            .rows
            .iter()
            .map(|r| vec![r.model.into(), r.nodes.to_string(), r.edges.to_string(), format!("{:.3}", r.ms_per_epoch)])
            .collect();
        output::write_rows(&dir.join("bench.csv"), &header, &body)?;
    }
    Ok(bench)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.3))).collect();
        assert!((log_log_slope(&pts).unwrap() - 1.3).abs() < 1e-12);
        assert_eq!(log_log_slope(&pts[..1]), None);
    }

    #[test]
    fn bench_spec_sums_to_n() {
        let cfg = RunConfig::benchmark(0);
        for n in [160, 1000, 5003] {
            let spec = bench_graph_spec(&cfg, n);
            assert_eq!(spec.sizes.iter().sum::<usize>(), n);
            assert!(spec.p_in > spec.p_out);
        }
        assert_eq!(bench_graph_spec(&cfg, 160).sizes, BENCHMARK_SIZES.to_vec());
    }

    #[test]
    fn baseline_names_round_trip() {
        for b in [Baseline::Origin, Baseline::Reweight, Baseline::Oversample] {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
        }
        assert!("smote".parse::<Baseline>().is_err());
    }
}
