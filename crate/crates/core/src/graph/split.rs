use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledGraph, Masks};
use crate::error::{Error, Result};

/// Per-class stratified split proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    /// train : val : test
    pub ratios: [f64; 3],
    pub seed: u64,
    pub min_train: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [1.0, 1.0, 8.0],
            seed: 0,
            min_train: 1,
        }
    }
}

impl SplitSpec {
    /// `(train, val, test)` counts for a class of `size` labeled nodes.
    ///
    /// Train gets `max(min_train, floor(share))`, then validation the same rule
    /// capped by what is left, and test takes the remainder.
    pub fn class_counts(&self, size: usize) -> (usize, usize, usize) {
        let sum: f64 = self.ratios.iter().sum();
        let share = |r: f64| ((size as f64) * r / sum + 1e-9).floor() as usize;
        let train = share(self.ratios[0]).max(self.min_train).min(size);
        let val = share(self.ratios[1]).max(self.min_train).min(size - train);
        (train, val, size - train - val)
    }

    fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::invalid(format!("split ratios must be positive: {:?}", self.ratios)));
        }
        Ok(())
    }
}

/// Stratified random split of the labeled nodes. Deterministic in `spec.seed`.
pub fn sample_splits(g: &LabeledGraph, spec: &SplitSpec) -> Result<LabeledGraph> {
    spec.validate()?;
    let mut by_class = vec![Vec::new(); g.num_classes()];
    for (i, l) in g.labels().iter().enumerate() {
        if let Some(c) = *l {
            by_class[c].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut masks = Masks::empty(g.num_nodes());
    for (class, nodes) in by_class.iter_mut().enumerate() {
        let required = spec.min_train.max(1);
        if nodes.len() < required {
            return Err(Error::ClassTooSmall {
                class,
                available: nodes.len(),
                required,
            });
        }
        nodes.shuffle(&mut rng);
        let (train, val, _) = spec.class_counts(nodes.len());
        for (pos, &node) in nodes.iter().enumerate() {
            if pos < train {
                masks.train[node] = true;
            } else if pos < train + val {
                masks.val[node] = true;
            } else {
                masks.test[node] = true;
            }
        }
    }
    g.clone().with_masks(masks)
}
