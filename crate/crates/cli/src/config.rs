//! Flat JSON run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tail2learn::graph::io::DatasetPaths;
use tail2learn::graph::{GcnVariant, SbmSpec, SplitSpec};
use tail2learn::model::Activation;
use tail2learn::training::TrainConfig;

use crate::error::{CliError, Result};

/// Standard synthetic benchmark class sizes.
pub const BENCHMARK_SIZES: [usize; 6] = [80, 40, 20, 10, 5, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // dataset on disk
    pub dataset_dir: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub splits: Option<PathBuf>,

    // synthetic block model
    pub sizes: Option<Vec<usize>>,
    pub dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub noise: f64,
    /// Defaults to `seed`.
    pub graph_seed: Option<u64>,
    /// Down-samples the synthetic graph to this `Ratio_LT(0.8)`.
    pub target_ratio: Option<f64>,

    // splits
    pub split_ratios: [f64; 3],
    /// Defaults to `seed`.
    pub split_seed: Option<u64>,
    pub min_train: usize,

    // training
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
    pub task_sizes: Option<Vec<usize>>,
    pub activation: Activation,
    pub dropout: f64,
    pub gcn_variant: GcnVariant,
    pub contrast_member_cap: Option<usize>,
    pub oversample_scale: f64,

    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SplitSpec::default();
        Self {
            dataset_dir: None,
            edges: None,
            features: None,
            labels: None,
            splits: None,
            sizes: None,
            dim: 16,
            p_in: 0.1,
            p_out: 0.01,
            noise: 0.5,
            graph_seed: None,
            target_ratio: None,
            split_ratios: s.ratios,
            split_seed: None,
            min_train: s.min_train,
            lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            max_epochs: t.max_epochs,
            patience: t.patience,
            gamma: t.gamma,
            tau: t.tau,
            seed: t.seed,
            hidden: t.hidden,
            task_sizes: t.task_sizes,
            activation: t.activation,
            dropout: t.dropout,
            gcn_variant: t.gcn_variant,
            contrast_member_cap: t.contrast_member_cap,
            oversample_scale: 1.0,
            out: PathBuf::from("runs"),
        }
    }
}

/// Where the graph comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Files(DatasetPaths),
    Synthetic(SbmSpec),
}

impl RunConfig {
    /// The standard synthetic benchmark.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            sizes: Some(BENCHMARK_SIZES.to_vec()),
            seed,
            ..Default::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn has_files(&self) -> bool {
        self.dataset_dir.is_some() || self.edges.is_some() || self.features.is_some() || self.labels.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        match (self.has_files(), self.sizes.is_some()) {
            (true, true) => return Err(CliError::Config("give either dataset paths or synthetic sizes, not both".into())),
            (false, false) => return Err(CliError::Config("need dataset paths or synthetic sizes".into())),
            _ => {}
        }
        if let Source::Files(p) = self.source()? {
            for f in [&p.edges, &p.features, &p.labels].into_iter().chain(p.splits.as_ref()) {
                if !f.exists() {
                    return Err(CliError::Config(format!("missing file {}", f.display())));
                }
            }
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn source(&self) -> Result<Source> {
        if let Some(sizes) = &self.sizes {
            return Ok(Source::Synthetic(SbmSpec {
                sizes: sizes.clone(),
                dim: self.dim,
                p_in: self.p_in,
                p_out: self.p_out,
                noise: self.noise,
                seed: self.graph_seed.unwrap_or(self.seed),
            }));
        }
        let mut paths = match &self.dataset_dir {
            Some(dir) => DatasetPaths::in_dir(dir),
            None => {
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| CliError::Config(format!("missing `{what}` path")))
                };
                DatasetPaths {
                    edges: need(&self.edges, "edges")?,
                    features: need(&self.features, "features")?,
                    labels: need(&self.labels, "labels")?,
                    splits: None,
                }
            }
        };
        if self.splits.is_some() {
            paths.splits = self.splits.clone();
        }
        Ok(Source::Files(paths))
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            ratios: self.split_ratios,
            seed: self.split_seed.unwrap_or(self.seed),
            min_train: self.min_train,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            max_epochs: self.max_epochs,
            patience: self.patience,
            gamma: self.gamma,
            tau: self.tau,
            seed: self.seed,
            hidden: self.hidden,
            task_sizes: self.task_sizes.clone(),
            activation: self.activation,
            dropout: self.dropout,
            gcn_variant: self.gcn_variant,
            contrast_member_cap: self.contrast_member_cap,
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON plus `tag`.
    pub fn hash(&self, tag: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        h.update(tag.as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sizes":[3,2],"gama":0.1}"#);
        assert!(err.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"sizes":[3,2],"gamma":0.01}"#).unwrap();
        assert_eq!(ok.gamma, 0.01);
        ok.validate().unwrap();
    }

    #[test]
    fn exactly_one_source() {
        assert!(RunConfig::default().validate().is_err());
        let both = RunConfig {
            dataset_dir: Some("x".into()),
            ..RunConfig::benchmark(0)
        };
        assert!(both.validate().is_err());
        let missing = RunConfig {
            dataset_dir: Some("/definitely/not/here".into()),
            ..Default::default()
        };
        assert!(missing.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::benchmark(0);
        assert_eq!(a.hash(""), RunConfig::benchmark(0).hash(""));
        assert_ne!(a.hash(""), RunConfig::benchmark(1).hash(""));
        assert_ne!(a.hash(""), a.hash("origin"));
        assert_eq!(a.hash("").len(), 16);
    }
}
