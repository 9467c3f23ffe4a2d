use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MinerKind {
    /// Hard quadruplets by learned PDDM similarity.
    #[default]
    Pddm,
    /// Hard quadruplets by Euclidean distance between embeddings (baseline).
    Euclidean,
}

/// Training hyperparameters. Defaults follow the reference recipe
/// (batch 64, lr 1e-4, momentum 0.9, α 0.5, β 1, λ 0.5, γ 5e-4, ≥4 samples
/// per class) with a desk-scale network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    /// Margin of the metric hinge on normalized scores.
    pub alpha: f64,
    /// Margin of the embedding hinge on distances.
    pub beta: f64,
    /// Weight of the embedding loss.
    pub lambda: f64,
    /// Weight decay coefficient.
    pub gamma: f64,
    pub min_per_class: usize,
    pub epochs: usize,
    /// Batches per epoch; 0 means `ceil(train samples / batch_size)`.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub dropout_p: f64,
    pub miner: MinerKind,
    /// Keeps the embedding network fixed; only the PDDM unit trains.
    pub freeze_embedding: bool,
    /// Fraction of classes used for training by the disjoint-class split.
    pub train_fraction: f64,
    pub early_stop: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Evaluate on the held-out split every this many epochs (0 disables).
    pub eval_every: usize,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            embedding_dim: 16,
            hidden_dims: vec![64, 64],
            lr: 1e-4,
            momentum: 0.9,
            alpha: 0.5,
            beta: 1.0,
            lambda: 0.5,
            gamma: 5e-4,
            min_per_class: 4,
            epochs: 400,
            steps_per_epoch: 0,
            seed: 0,
            dropout_p: 0.5,
            miner: MinerKind::Pddm,
            freeze_embedding: false,
            train_fraction: 0.5,
            early_stop: true,
            plateau_window: 20,
            plateau_tol: 1e-4,
            eval_every: 0,
            eval_ks: vec![1, 2, 4, 8],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.min_per_class < 4 {
            return bad(format!(
                "min_per_class must be >= 4, got {}",
                self.min_per_class
            ));
        }
        if self.batch_size < 2 * self.min_per_class {
            return bad(format!(
                "batch_size {} must be at least 2 * min_per_class ({})",
                self.batch_size,
                2 * self.min_per_class
            ));
        }
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("embedding_dim and hidden_dims must be positive".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.eval_ks.contains(&0) {
            return bad("eval_ks must be positive".into());
        }
        Ok(())
    }

    /// Layer widths of the embedding network for inputs of size `input_dim`.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    pub fn steps_for(&self, n_samples: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            n_samples.div_ceil(self.batch_size).max(1)
        }
    }
}
