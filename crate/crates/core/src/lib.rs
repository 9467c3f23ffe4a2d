//! Position-dependent deep metric learning.
//!
//! An embedding network maps samples onto the unit sphere; a small PDDM unit
//! scores pairs of embeddings from both their difference and their mean, so
//! the learned similarity can depend on where in feature space a pair sits.
//! Training mines one hard quadruplet per batch and minimizes a double-header
//! hinge on PDDM scores plus a double-header hinge on Euclidean distances.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod miner;
pub mod params;
pub mod pddm;
pub mod trainer;

pub use data::{Dataset, Label, Sample, SynthConfig};
pub use embedding::EmbeddingNet;
pub use error::{Error, Result};
pub use eval::Metric;
pub use losses::LossBreakdown;
pub use math::Matrix;
pub use miner::{Quadruplet, Selection};
pub use params::Parameters;
pub use pddm::{PddmParams, ScoreScaling};
pub use trainer::{MinerKind, Model, TrainConfig, TrainHistory, Trainer};
