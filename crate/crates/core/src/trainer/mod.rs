//! Joint metric + embedding training.
//!
//! Each step embeds a class-balanced batch, mines one hard quadruplet,
//! evaluates `E_m + λ E_e + γ‖W‖²` on it and applies one SGD-momentum
//! update. The four quadruplet members are four streams through the same
//! embedding network; their gradients are summed into the shared weights.

mod checkpoint;
mod compare;
mod config;
mod optimizer;
mod sampler;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use compare::{epochs_to_reach, mine_compare, Arm, Comparison, ComparisonSummary};
pub use config::{MinerKind, TrainConfig};
pub use optimizer::SgdMomentum;
pub use sampler::{sample_batch, Batch};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedding::{EmbeddingNet, ForwardCache};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, score_distribution, Metric};
use crate::losses::{embedding_loss, joint_loss, metric_loss, regularizer, LossBreakdown};
use crate::math::euclidean_distance;
use crate::miner::{boundary_violations, evaluation_bound, select_with, Quadruplet};
use crate::params::{Parameters, TensorView};
use crate::pddm::{self, DropoutMask, PddmParams, ScoreScaling};

/// Embedding network plus PDDM unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub embedding: EmbeddingNet,
    pub pddm: PddmParams,
}

/// Offset between the embedding and PDDM initialization seeds.
const PDDM_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl Model {
    pub fn init(input_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            embedding: EmbeddingNet::init(&cfg.layer_dims(input_dim), cfg.seed)?,
            pddm: PddmParams::init(cfg.embedding_dim, cfg.seed ^ PDDM_SEED_SALT)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: self.embedding.zeros_like(),
            pddm: self.pddm.zeros_like(),
        }
    }

    pub fn embed_all<F: AsRef<[f64]>>(&self, inputs: &[F]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .map(|x| self.embedding.embed(x.as_ref()))
            .collect()
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut t = self.embedding.tensors();
        t.extend(self.pddm.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.embedding.tensors_mut();
        t.extend(self.pddm.tensors_mut());
        t
    }
}

/// Loss and gradients of one fixed quadruplet.
#[derive(Debug, Clone)]
pub struct QuadrupletEval {
    pub loss: LossBreakdown,
    pub grads: Model,
    /// Raw PDDM scores `S_îĵ`, `S_îk̂`, `S_ĵl̂`.
    pub raw_scores: [f64; 3],
}

/// Joint objective of a fixed quadruplet with the score range held constant.
///
/// `inputs` are the raw samples `x_î, x_ĵ, x_k̂, x_l̂`. Selection and the
/// min-max range are treated as constants, so this is exactly the function
/// whose gradient a training step follows.
pub fn quadruplet_objective(
    model: &Model,
    inputs: [&[f64]; 4],
    scaling: &ScoreScaling,
    mask: Option<&DropoutMask>,
    cfg: &TrainConfig,
) -> Result<QuadrupletEval> {
    let mut feats: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut caches: Vec<ForwardCache> = Vec::with_capacity(4);
    for x in inputs {
        let (f, c) = model.embedding.forward(x)?;
        feats.push(f);
        caches.push(c);
    }

    // Pair roles: (î,ĵ), (î,k̂), (ĵ,l̂).
    let roles = [(0usize, 1usize), (0, 2), (1, 3)];
    let mut pair_caches = Vec::with_capacity(3);
    let mut raw = [0.0; 3];
    for (slot, &(a, b)) in roles.iter().enumerate() {
        let (s, c) = pddm::forward(&feats[a], &feats[b], &model.pddm, mask)?;
        raw[slot] = s;
        pair_caches.push(c);
    }
    let norm = raw.map(|s| scaling.apply(s));
    let ml = metric_loss(norm[0], norm[1], norm[2], cfg.alpha)?;
    let el = embedding_loss(&feats[0], &feats[1], &feats[2], &feats[3], cfg.beta)?;
    let (reg, reg_grads) = regularizer(model);
    let mut loss = joint_loss(ml.value, el.value, reg, cfg.lambda, cfg.gamma);
    loss.hinges = [ml.hinges[0], ml.hinges[1], el.hinges[0], el.hinges[1]];

    let mut grads = model.zeros_like();
    let mut d_feats: Vec<Vec<f64>> = el
        .grads
        .iter()
        .map(|g| g.iter().map(|v| cfg.lambda * v).collect())
        .collect();
    let slope = scaling.slope();
    let d_scores = [ml.d_pos, ml.d_neg1, ml.d_neg2];
    for (slot, &(a, b)) in roles.iter().enumerate() {
        let d_s = d_scores[slot] * slope;
        if d_s == 0.0 {
            continue;
        }
        let (d_fa, d_fb) =
            pddm::backward_into(&pair_caches[slot], &model.pddm, d_s, &mut grads.pddm)?;
        for (acc, g) in d_feats[a].iter_mut().zip(&d_fa) {
            *acc += g;
        }
        for (acc, g) in d_feats[b].iter_mut().zip(&d_fb) {
            *acc += g;
        }
    }
    for (cache, d_f) in caches.iter().zip(&d_feats) {
        if d_f.iter().any(|v| *v != 0.0) {
            model
                .embedding
                .backward_into(cache, d_f, &mut grads.embedding)?;
        }
    }
    grads.add_scaled(&reg_grads, cfg.gamma);
    Ok(QuadrupletEval {
        loss,
        grads,
        raw_scores: raw,
    })
}

/// What a single step did.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Quadruplet as batch positions.
    pub quad: Quadruplet,
    /// Quadruplet as dataset indices.
    pub sample_quad: Quadruplet,
    pub pddm_evaluations: usize,
    pub evaluation_bound: usize,
    pub positive_pairs: usize,
    /// Whether each hard negative lies inside its anchor's class radius.
    pub violations: [bool; 2],
}

/// One forward / mine / backward / update cycle.
pub fn train_step(
    ds: &Dataset,
    batch: &Batch,
    model: &mut Model,
    optimizer: &mut SgdMomentum,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let inputs: Vec<&[f64]> = batch
        .indices
        .iter()
        .map(|&i| ds.sample(i).features.as_slice())
        .collect();
    let feats = model.embed_all(&inputs)?;
    let mask =
        (cfg.dropout_p > 0.0).then(|| DropoutMask::sample(cfg.embedding_dim, cfg.dropout_p, rng));
    let mask = mask.as_ref();
    let pddm_score =
        |a: usize, b: usize| pddm::forward(&feats[a], &feats[b], &model.pddm, mask).map(|(s, _)| s);

    let (selection, scaling, pddm_evaluations) = match cfg.miner {
        MinerKind::Pddm => {
            let sel = select_with(&batch.labels, pddm_score)?;
            let n = sel.evaluations();
            let scaling = sel.scaling;
            (sel, scaling, n)
        }
        MinerKind::Euclidean => {
            let sel = select_with(&batch.labels, |a, b| {
                euclidean_distance(&feats[a], &feats[b]).map(|d| -d)
            })?;
            // The metric loss still needs a score range; use the same pair context.
            let scores = sel
                .evaluated
                .iter()
                .map(|&(a, b)| pddm_score(a, b))
                .collect::<Result<Vec<f64>>>()?;
            let scaling = ScoreScaling::from_scores(&scores)?;
            let n = scores.len();
            (sel, scaling, n)
        }
    };
    let bound = evaluation_bound(selection.positive_pairs, batch.len());
    if pddm_evaluations > bound {
        return Err(Error::Config(format!(
            "mining used {pddm_evaluations} PDDM evaluations, bound is {bound}"
        )));
    }
    let quad = selection.quad;
    let violations = boundary_violations(&feats, &batch.labels, &quad)?;
    let quad_inputs = quad.indices().map(|p| inputs[p]);
    let eval = quadruplet_objective(model, quad_inputs, &scaling, mask, cfg)?;
    let mut grads = eval.grads;
    if cfg.freeze_embedding {
        grads.embedding.fill_zero();
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    optimizer.step(model, &grads);
    let to_sample = |p: usize| batch.indices[p];
    Ok(StepOutcome {
        loss: eval.loss,
        quad,
        sample_quad: Quadruplet {
            i: to_sample(quad.i),
            j: to_sample(quad.j),
            k: to_sample(quad.k),
            l: to_sample(quad.l),
        },
        pddm_evaluations,
        evaluation_bound: bound,
        positive_pairs: selection.positive_pairs,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub e_m: f64,
    pub e_e: f64,
    pub reg: f64,
    pub total: f64,
    pub pddm_evaluations: usize,
    pub evaluation_bound: usize,
    pub boundary_violations: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub recall_euclidean: Vec<(usize, f64)>,
    /// `None` when the PDDM unit collapses on some evaluated pair.
    pub recall_pddm: Option<Vec<(usize, f64)>>,
    pub overlap_pddm: Option<f64>,
    pub overlap_euclidean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: usize,
    /// Steps dropped because a pair collapsed to a degenerate normalization.
    pub skipped_steps: usize,
    pub mean_total: f64,
    pub mean_e_m: f64,
    pub mean_e_e: f64,
    /// Fraction of mined hard negatives that sit inside the anchor's class radius.
    pub mining_precision: f64,
    pub eval: Option<EvalSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub skipped_steps: u64,
    pub pddm_evaluations: u64,
    /// Excluded from equality-sensitive outputs; varies between runs.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

impl TrainHistory {
    pub fn final_epoch_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_total)
    }
}

/// Maps a degenerate PDDM evaluation to `None`; other errors pass through.
pub fn unless_degenerate<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::DegenerateBranch { .. } | Error::DegenerateNorm { .. })) => {
            log::warn!("PDDM metric unavailable: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Default histogram resolution for score-distribution snapshots.
pub const DISTRIBUTION_BINS: usize = 50;

pub fn evaluate_snapshot(model: &Model, ds: &Dataset, ks: &[usize]) -> Result<EvalSnapshot> {
    let feats = model.embed_all(&ds.features())?;
    let labels = ds.labels();
    let eu = recall_at_k(&feats, &labels, ks, Metric::Euclidean)?;
    let pd = unless_degenerate(recall_at_k(&feats, &labels, ks, Metric::Pddm(&model.pddm)))?;
    let ov_p = match pd {
        Some(_) => unless_degenerate(score_distribution(
            &feats,
            &labels,
            Metric::Pddm(&model.pddm),
            DISTRIBUTION_BINS,
        ))?,
        None => None,
    };
    let ov_e = score_distribution(&feats, &labels, Metric::Euclidean, DISTRIBUTION_BINS)?;
    Ok(EvalSnapshot {
        recall_euclidean: eu.recall_at_k.into_iter().collect(),
        recall_pddm: pd.map(|r| r.recall_at_k.into_iter().collect()),
        overlap_pddm: ov_p.map(|d| d.overlap),
        overlap_euclidean: ov_e.overlap,
    })
}

/// Owns the model and optimizer across epochs; resumable from a checkpoint.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: SgdMomentum,
    /// Steps completed so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(input_dim, &cfg)?;
        let optimizer = SgdMomentum::new(cfg.lr, cfg.momentum, model.num_params());
        Ok(Self {
            cfg,
            model,
            optimizer,
            step: 0,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let n = ckpt.model.num_params();
        let velocity = ckpt.velocity.unwrap_or_else(|| vec![0.0; n]);
        if velocity.len() != n {
            return Err(Error::CheckpointShape {
                what: "optimizer state",
                found: velocity.len().to_string(),
                expected: n.to_string(),
            });
        }
        Ok(Self {
            optimizer: SgdMomentum::with_velocity(ckpt.config.lr, ckpt.config.momentum, velocity),
            cfg: ckpt.config,
            model: ckpt.model,
            step: ckpt.step,
            epoch: ckpt.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            velocity: Some(self.optimizer.velocity().to_vec()),
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Batch/dropout randomness of an epoch depends only on the seed and the
    /// epoch number, so resumed runs replay the same stream.
    fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch + 1);
        rng
    }

    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        history: &mut TrainHistory,
    ) -> Result<()> {
        let epoch = self.epoch;
        let mut rng = self.epoch_rng(epoch);
        let steps = self.cfg.steps_for(train.len());
        let (mut sum_total, mut sum_m, mut sum_e) = (0.0, 0.0, 0.0);
        let mut violations = 0usize;
        let mut skipped = 0usize;
        for _ in 0..steps {
            let batch = sample_batch(train, &self.cfg, &mut rng)?;
            let out = match train_step(
                train,
                &batch,
                &mut self.model,
                &mut self.optimizer,
                &self.cfg,
                &mut rng,
            ) {
                Ok(out) => out,
                Err(e @ (Error::DegenerateBranch { .. } | Error::DegenerateNorm { .. })) => {
                    log::warn!("step {} skipped: {e}", self.step);
                    skipped += 1;
                    if skipped == steps {
                        return Err(e);
                    }
                    self.step += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let v = out.violations.iter().filter(|&&b| b).count();
            violations += v;
            sum_total += out.loss.total;
            sum_m += out.loss.e_m;
            sum_e += out.loss.e_e;
            history.pddm_evaluations += out.pddm_evaluations as u64;
            history.steps.push(StepRecord {
                step: self.step,
                epoch,
                e_m: out.loss.e_m,
                e_e: out.loss.e_e,
                reg: out.loss.reg,
                total: out.loss.total,
                pddm_evaluations: out.pddm_evaluations,
                evaluation_bound: out.evaluation_bound,
                boundary_violations: v as u8,
            });
            self.step += 1;
        }
        self.epoch += 1;
        let snapshot = match eval {
            Some(ds) if self.cfg.eval_every > 0 && self.epoch % self.cfg.eval_every as u64 == 0 => {
                Some(evaluate_snapshot(&self.model, ds, &self.cfg.eval_ks)?)
            }
            _ => None,
        };
        history.skipped_steps += skipped as u64;
        let n = (steps - skipped) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            steps,
            skipped_steps: skipped,
            mean_total: sum_total / n,
            mean_e_m: sum_m / n,
            mean_e_e: sum_e / n,
            mining_precision: violations as f64 / (2.0 * n),
            eval: snapshot,
        });
        Ok(())
    }

    /// Runs up to `epochs` more epochs, stopping early on a loss plateau if enabled.
    pub fn run(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        epochs: usize,
        history: &mut TrainHistory,
    ) -> Result<()> {
        let start = Instant::now();
        for _ in 0..epochs {
            self.run_epoch(train, eval, history)?;
            if self.cfg.early_stop
                && plateaued(
                    &history.epochs,
                    self.cfg.plateau_window,
                    self.cfg.plateau_tol,
                )
            {
                log::info!("loss plateau after epoch {}; stopping", self.epoch);
                history.stopped_early = true;
                break;
            }
        }
        history.wall_clock_ms += start.elapsed().as_millis();
        Ok(())
    }
}

/// True when each of the last `window` epoch-to-epoch relative changes of
/// the mean total loss is below `tol`.
pub fn plateaued(epochs: &[EpochRecord], window: usize, tol: f64) -> bool {
    if window == 0 || epochs.len() <= window {
        return false;
    }
    epochs[epochs.len() - window - 1..].windows(2).all(|w| {
        let (prev, cur) = (w[0].mean_total, w[1].mean_total);
        let scale = prev.abs().max(cur.abs());
        scale == 0.0 || (cur - prev).abs() / scale < tol
    })
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    train_with_eval(ds, None, cfg)
}

pub fn train_with_eval(
    ds: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    let mut trainer = Trainer::new(cfg.clone(), ds.dim())?;
    let mut history = TrainHistory::default();
    trainer.run(ds, eval, cfg.epochs, &mut history)?;
    Ok((trainer.model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_heterogeneous, SynthConfig};
    use crate::math::{finite_difference_gradient, relative_error};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            embedding_dim: 8,
            hidden_dims: vec![12],
            lr: 0.01,
            dropout_p: 0.0,
            epochs: 3,
            ..Default::default()
        }
    }

    fn small_data() -> Dataset {
        synth_heterogeneous(&SynthConfig {
            samples_per_class: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = small_data();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let (model, history) = train(&ds, &cfg).unwrap();
        assert_eq!(model, Model::init(ds.dim(), &cfg).unwrap());
        assert!(history.steps.is_empty() && history.epochs.is_empty());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = small_data();
        let cfg = TrainConfig {
            lr: 0.0,
            ..small_cfg()
        };
        let (model, history) = train(&ds, &cfg).unwrap();
        assert_eq!(model, Model::init(ds.dim(), &cfg).unwrap());
        assert!(!history.steps.is_empty());
        assert!(history
            .steps
            .iter()
            .all(|s| s.total.is_finite() && s.total > 0.0));
    }

    #[test]
    fn frozen_embedding_moves_only_pddm() {
        let ds = small_data();
        let cfg = TrainConfig {
            lambda: 0.0,
            freeze_embedding: true,
            ..small_cfg()
        };
        let init = Model::init(ds.dim(), &cfg).unwrap();
        let (model, _) = train(&ds, &cfg).unwrap();
        assert_eq!(model.embedding, init.embedding);
        assert_ne!(model.pddm, init.pddm);
    }

    #[test]
    fn identical_seeds_identical_histories() {
        let ds = small_data();
        let a = train(&ds, &small_cfg()).unwrap();
        let b = train(&ds, &small_cfg()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn step_count_respects_mining_bound() {
        let ds = small_data();
        let (_, history) = train(&ds, &small_cfg()).unwrap();
        for s in &history.steps {
            assert!(s.pddm_evaluations <= s.evaluation_bound);
        }
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let ds = small_data();
        let cfg = TrainConfig {
            epochs: 4,
            early_stop: false,
            ..small_cfg()
        };
        let (full_model, full_history) = train(&ds, &cfg).unwrap();

        let mut t = Trainer::new(cfg.clone(), ds.dim()).unwrap();
        let mut h = TrainHistory::default();
        t.run(&ds, None, 2, &mut h).unwrap();
        let mut resumed = Trainer::from_checkpoint(t.checkpoint()).unwrap();
        resumed.run(&ds, None, 2, &mut h).unwrap();
        assert_eq!(resumed.model, full_model);
        assert_eq!(h.steps, full_history.steps);
    }

    #[test]
    fn plateau_rule() {
        let rec = |v: f64| EpochRecord {
            epoch: 0,
            steps: 1,
            skipped_steps: 0,
            mean_total: v,
            mean_e_m: 0.0,
            mean_e_e: 0.0,
            mining_precision: 0.0,
            eval: None,
        };
        let flat: Vec<EpochRecord> = (0..5).map(|_| rec(1.0)).collect();
        assert!(plateaued(&flat, 3, 1e-4));
        assert!(!plateaued(&flat, 5, 1e-4));
        let moving: Vec<EpochRecord> = (0..5).map(|i| rec(1.0 + i as f64 * 0.1)).collect();
        assert!(!plateaued(&moving, 3, 1e-4));
    }

    /// Builds a quadruplet whose hinges, ReLUs and |·| are all away from kinks.
    fn kink_free_setup(seed: u64) -> Option<(Model, [Vec<f64>; 4], ScoreScaling, TrainConfig)> {
        use rand::Rng;
        let cfg = TrainConfig {
            embedding_dim: 4,
            hidden_dims: vec![6],
            gamma: 5e-4,
            lambda: 0.5,
            dropout_p: 0.0,
            ..Default::default()
        };
        let model = Model::init(
            5,
            &TrainConfig {
                seed,
                ..cfg.clone()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: [Vec<f64>; 4] =
            std::array::from_fn(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let feats: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| model.embedding.embed(x))
            .collect::<Result<_>>()
            .ok()?;
        let raw = [
            pddm::score(&feats[0], &feats[1], &model.pddm).ok()?,
            pddm::score(&feats[0], &feats[2], &model.pddm).ok()?,
            pddm::score(&feats[1], &feats[3], &model.pddm).ok()?,
        ];
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min) - 0.3;
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.3;
        let scaling = ScoreScaling { min: lo, max: hi };
        let eval = quadruplet_objective(
            &model,
            std::array::from_fn(|r| inputs[r].as_slice()),
            &scaling,
            None,
            &cfg,
        )
        .ok()?;
        let hinge_args = {
            let n = raw.map(|s| scaling.apply(s));
            let f = &feats;
            let d = |a: usize, b: usize| euclidean_distance(&f[a], &f[b]).unwrap();
            [
                cfg.alpha + n[1] - n[0],
                cfg.alpha + n[2] - n[0],
                cfg.beta + d(0, 1) - d(0, 2),
                cfg.beta + d(0, 1) - d(1, 3),
            ]
        };
        if hinge_args.iter().any(|h| h.abs() < 1e-3) || eval.loss.e_m == 0.0 {
            return None;
        }
        Some((model, inputs, scaling, cfg))
    }

    #[test]
    fn one_small_step_decreases_the_loss() {
        let mut found = 0;
        for seed in 0..200 {
            let Some((model, inputs, scaling, cfg)) = kink_free_setup(seed) else {
                continue;
            };
            let arr = std::array::from_fn(|r| inputs[r].as_slice());
            let before = quadruplet_objective(&model, arr, &scaling, None, &cfg).unwrap();
            let mut stepped = model.clone();
            let mut opt = SgdMomentum::new(1e-6, 0.9, model.num_params());
            opt.step(&mut stepped, &before.grads);
            let after = quadruplet_objective(&stepped, arr, &scaling, None, &cfg).unwrap();
            assert!(after.loss.total < before.loss.total, "seed {seed}");
            found += 1;
            if found == 10 {
                break;
            }
        }
        assert_eq!(found, 10);
    }

    #[test]
    fn four_stream_gradient_matches_finite_differences() {
        let mut checked = 0;
        for seed in 0..500 {
            let Some((model, inputs, scaling, cfg)) = kink_free_setup(seed) else {
                continue;
            };
            let arr = std::array::from_fn(|r| inputs[r].as_slice());
            let eval = quadruplet_objective(&model, arr, &scaling, None, &cfg).unwrap();
            let mut scratch = model.clone();
            let fd = finite_difference_gradient(
                |t| {
                    scratch.assign_flat(t);
                    quadruplet_objective(&scratch, arr, &scaling, None, &cfg)
                        .unwrap()
                        .loss
                        .total
                },
                &model.flatten(),
                1e-6,
            )
            .unwrap();
            let mut fd_model = model.zeros_like();
            fd_model.assign_flat(&fd);
            let err = relative_error(
                &eval.grads.embedding.flatten(),
                &fd_model.embedding.flatten(),
            );
            assert!(
                err < 1e-4,
                "seed {seed}: shared embedding grads rel err {err}"
            );
            checked += 1;
            if checked == 5 {
                break;
            }
        }
        assert_eq!(checked, 5);
    }
}
