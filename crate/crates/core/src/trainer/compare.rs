use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;

use super::{evaluate_snapshot, EvalSnapshot, MinerKind, TrainConfig, TrainHistory, Trainer};

/// One trained arm of a miner comparison.
#[derive(Debug, Clone)]
pub struct Arm {
    pub miner: MinerKind,
    /// Final model, optimizer state and counters.
    pub trainer: Trainer,
    pub history: TrainHistory,
    /// Evaluation of the final model on the held-out split.
    pub final_eval: EvalSnapshot,
}

impl Arm {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.history.epochs.iter().map(|e| e.mean_total).collect()
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.final_eval
            .recall_euclidean
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, r)| *r)
    }

    pub fn mean_mining_precision(&self) -> f64 {
        let e = &self.history.epochs;
        e.iter().map(|r| r.mining_precision).sum::<f64>() / e.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub epochs: usize,
    pub pddm_final_loss: f64,
    pub euclidean_final_loss: f64,
    /// First epoch (1-based) at which the PDDM arm's mean loss is at or below
    /// the Euclidean arm's final mean loss.
    pub pddm_epochs_to_euclidean_final: Option<usize>,
    pub pddm_recall_at_1: f64,
    pub euclidean_recall_at_1: f64,
    pub pddm_mining_precision: f64,
    pub euclidean_mining_precision: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub pddm: Arm,
    pub euclidean: Arm,
}

impl Comparison {
    pub fn summary(&self) -> ComparisonSummary {
        let target = self
            .euclidean
            .history
            .final_epoch_loss()
            .unwrap_or(f64::NAN);
        ComparisonSummary {
            epochs: self.pddm.history.epochs.len(),
            pddm_final_loss: self.pddm.history.final_epoch_loss().unwrap_or(f64::NAN),
            euclidean_final_loss: target,
            pddm_epochs_to_euclidean_final: epochs_to_reach(&self.pddm.epoch_losses(), target),
            pddm_recall_at_1: self.pddm.recall_at(1).unwrap_or(f64::NAN),
            euclidean_recall_at_1: self.euclidean.recall_at(1).unwrap_or(f64::NAN),
            pddm_mining_precision: self.pddm.mean_mining_precision(),
            euclidean_mining_precision: self.euclidean.mean_mining_precision(),
        }
    }
}

/// 1-based index of the first loss at or below `target`.
pub fn epochs_to_reach(losses: &[f64], target: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= target).map(|i| i + 1)
}

/// Trains one arm per miner with otherwise identical settings and the same
/// seed. Early stopping is disabled so both arms share one epoch grid.
pub fn mine_compare(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<Comparison> {
    let mut ks = cfg.eval_ks.clone();
    if !ks.contains(&1) {
        ks.insert(0, 1);
    }
    let run = |miner| -> Result<Arm> {
        let cfg = TrainConfig {
            miner,
            early_stop: false,
            ..cfg.clone()
        };
        let mut trainer = Trainer::new(cfg.clone(), train.dim())?;
        let mut history = TrainHistory::default();
        trainer.run(train, Some(test), cfg.epochs, &mut history)?;
        let final_eval = evaluate_snapshot(&trainer.model, test, &ks)?;
        Ok(Arm {
            miner,
            trainer,
            history,
            final_eval,
        })
    };
    Ok(Comparison {
        pddm: run(MinerKind::Pddm)?,
        euclidean: run(MinerKind::Euclidean)?,
    })
}
