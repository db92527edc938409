use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use t2l_cli::commands::{self, Baseline, DEFAULT_BENCH_SIZES};
use t2l_cli::config::RunConfig;
use t2l_cli::error::Result;
use t2l_cli::output::{metric_values, METRIC_NAMES};
use tail2learn::eval::Metrics;
use tail2learn::graph::io::DatasetPaths;

#[derive(Parser)]
#[command(name = "t2l", version, about = "Long-tail node classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON run config; the synthetic benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::benchmark(0),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tailed dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Down-sample to this Ratio_LT(0.8).
        #[arg(long)]
        target_ratio: Option<f64>,
    },
    /// Class histogram, imbalance and long-tailedness ratios.
    Stats {
        /// Dataset directory (edges.tsv, features.csv, labels.tsv, optional splits.tsv).
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "p", default_values_t = vec![0.8])]
        ps: Vec<f64>,
        /// Also write the statistics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train one model and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on the configured graph.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full model vs. no contrastive terms vs. cross-entropy only.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Grid over the contrastive weight and temperature.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "gamma", default_values_t = vec![0.01, 0.05, 0.1, 0.5])]
        gammas: Vec<f64>,
        #[arg(long = "tau", default_values_t = vec![0.01, 0.1, 0.5, 1.0])]
        taus: Vec<f64>,
    },
    /// Per-epoch wall time as the graph grows.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BENCH_SIZES.to_vec())]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
    },
}

fn print_metrics(split: &str, m: Option<&Metrics>) {
    match m {
        Some(m) => {
            let cells: Vec<String> = METRIC_NAMES
                .iter()
                .zip(metric_values(m))
                .map(|(n, v)| format!("{n}={v:.4}"))
                .collect();
            println!("{split:5} {}", cells.join(" "));
        }
        None => println!("{split:5} (empty)"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, target_ratio } => {
            let mut cfg = common.load()?;
            if target_ratio.is_some() {
                cfg.target_ratio = target_ratio;
            }
            let (paths, stats) = commands::cmd_gen(&cfg, &cfg.out)?;
            print!("{}", commands::format_stats(&stats));
            println!("wrote {}", paths.edges.parent().unwrap_or(Path::new(".")).display());
        }
        Command::Stats { data, ps, csv } => {
            let stats = commands::cmd_stats(&DatasetPaths::in_dir(&data), &ps, csv.as_deref())?;
            print!("{}", commands::format_stats(&stats));
        }
        Command::Train { common, baseline, force } => {
            let cfg = common.load()?;
            let run = commands::cmd_train(&cfg, baseline, force)?;
            println!("run {}", run.dir.display());
            println!("best epoch {} of {}", run.outcome.best_epoch, run.outcome.logs.len());
            print_metrics("train", run.evaluation.train.as_ref());
            print_metrics("val", run.evaluation.val.as_ref());
            print_metrics("test", run.evaluation.test.as_ref());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let ev = commands::cmd_eval(&cfg, &checkpoint)?;
            print_metrics("train", ev.train.as_ref());
            print_metrics("val", ev.val.as_ref());
            print_metrics("test", ev.test.as_ref());
        }
        Command::Ablate { common, seeds } => {
            let cfg = common.load()?;
            let ab = commands::cmd_ablate(&cfg, seeds, Some(&cfg.out))?;
            println!("variant  {}", METRIC_NAMES.join(" "));
            for r in &ab.rows {
                let v: Vec<String> = r.mean.iter().map(|x| format!("{x:.4}")).collect();
                println!("{:8} {}", r.variant, v.join(" "));
            }
        }
        Command::Sweep { common, gammas, taus } => {
            let cfg = common.load()?;
            let sw = commands::cmd_sweep(&cfg, &gammas, &taus, Some(&cfg.out))?;
            for r in &sw.rows {
                println!("gamma={} tau={} bacc={:.4}", r.gamma, r.tau, r.test[0]);
            }
            println!("bacc spread {:.4}", sw.bacc_spread);
        }
        Command::Bench { common, sizes, epochs } => {
            let cfg = common.load()?;
            let b = commands::cmd_bench(&cfg, &sizes, epochs, Some(&cfg.out))?;
            for r in &b.rows {
                println!("{:10} n={} m={} {:.3} ms/epoch", r.model, r.nodes, r.edges, r.ms_per_epoch);
            }
            for (m, s) in &b.slopes {
                match s {
                    Some(s) => println!("{m} slope {s:.3}"),
                    None => println!("{m} slope n/a"),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("T2L_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
