//! Library side of the `pddm` command-line tool.
//!
//! Every command is described by an [`Invocation`]; running one writes its
//! artifacts plus a `RunManifest` that can be fed back to `pddm rerun`.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pddm_core::data::{load_dataset, split_disjoint_classes, synth_heterogeneous, DataFormat};
use pddm_core::eval::{ncm_transfer_accuracy, recall_at_k, score_distribution, DistributionReport};
use pddm_core::trainer::{
    load_checkpoint, load_checkpoint_for, mine_compare, save_checkpoint, Arm, ComparisonSummary,
    DISTRIBUTION_BINS,
};
use pddm_core::{Dataset, Metric, SynthConfig, TrainConfig, TrainHistory, Trainer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const COMPARE_FILE: &str = "compare.jsonl";

/// Fraction of each held-out class used to estimate class means for NCM.
pub const NCM_FIT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Every sample in the data file.
    All,
    /// Classes the checkpoint was trained on.
    Train,
    /// Held-out classes.
    Test,
}

/// A fully resolved command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenData {
        config: SynthConfig,
        out: PathBuf,
    },
    Train {
        config: TrainConfig,
        data: PathBuf,
        out: PathBuf,
        resume: Option<PathBuf>,
    },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        ks: Vec<usize>,
        split: Split,
        out: PathBuf,
    },
    MineCompare {
        config: TrainConfig,
        data: PathBuf,
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub invocation: Invocation,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_ms: u64,
}

/// What a command produced: files on disk and a short human summary.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: String,
    pub manifest_path: PathBuf,
}

impl Invocation {
    fn out(&self) -> &Path {
        match self {
            Self::GenData { out, .. }
            | Self::Train { out, .. }
            | Self::Eval { out, .. }
            | Self::MineCompare { out, .. } => out,
        }
    }

    pub fn with_out(mut self, path: PathBuf) -> Self {
        match &mut self {
            Self::GenData { out, .. }
            | Self::Train { out, .. }
            | Self::Eval { out, .. }
            | Self::MineCompare { out, .. } => *out = path,
        }
        self
    }

    fn input_paths(&self) -> Vec<&Path> {
        match self {
            Self::GenData { .. } => vec![],
            Self::Train { data, resume, .. } => std::iter::once(data.as_path())
                .chain(resume.as_deref())
                .collect(),
            Self::Eval {
                checkpoint, data, ..
            } => vec![checkpoint, data],
            Self::MineCompare { data, .. } => vec![data],
        }
    }

    /// gen-data writes a single file, so its manifest sits next to it.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Self::GenData { out, .. } => out.with_extension("manifest.json"),
            _ => self.out().join(MANIFEST_FILE),
        }
    }

    pub fn run(&self) -> Result<Outcome> {
        let start = Instant::now();
        let inputs = self
            .input_paths()
            .into_iter()
            .map(|p| {
                Ok(InputFile {
                    path: p.to_path_buf(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (outputs, summary) = match self {
            Self::GenData { config, out } => gen_data(config, out)?,
            Self::Train {
                config,
                data,
                out,
                resume,
            } => train(config, data, out, resume.as_deref())?,
            Self::Eval {
                checkpoint,
                data,
                ks,
                split,
                out,
            } => eval(checkpoint, data, ks, *split, out)?,
            Self::MineCompare { config, data, out } => compare(config, data, out)?,
        };
        let manifest = RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            invocation: self.clone(),
            inputs,
            outputs: outputs.clone(),
            wall_clock_ms: start.elapsed().as_millis() as u64,
        };
        let manifest_path = self.manifest_path();
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(Outcome {
            outputs,
            summary,
            manifest_path,
        })
    }
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Checks that every recorded input still has the recorded content.
    pub fn verify_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = sha256_file(&f.path)?;
            ensure!(
                now == f.sha256,
                "input {} changed since the manifest was written",
                f.path.display()
            );
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

pub fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path, DataFormat::from_path(path))
        .with_context(|| format!("loading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(cfg: &SynthConfig, out: &Path) -> Result<(Vec<PathBuf>, String)> {
    let ds = synth_heterogeneous(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ds.save_csv(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let summary = format!(
        "wrote {} samples in {} classes (dim {}) to {}",
        ds.len(),
        ds.num_classes(),
        ds.dim(),
        out.display()
    );
    Ok((vec![out.to_path_buf()], summary))
}

fn train(
    cfg: &TrainConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(Vec<PathBuf>, String)> {
    cfg.validate()?;
    let ds = load_data(data)?;
    let (train_ds, test_ds) = split_disjoint_classes(&ds, cfg.train_fraction, cfg.seed)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint_for(path, cfg, ds.dim())?;
            ensure!(
                ckpt.config.seed == cfg.seed && ckpt.config.train_fraction == cfg.train_fraction,
                "resuming needs the same seed and train_fraction as the checkpoint (it has seed {}, train_fraction {})",
                ckpt.config.seed,
                ckpt.config.train_fraction
            );
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.optimizer.lr = cfg.lr;
            t.optimizer.momentum = cfg.momentum;
            t.cfg = cfg.clone();
            t
        }
        None => Trainer::new(cfg.clone(), ds.dim())?,
    };
    let start_step = trainer.step;
    let remaining = cfg.epochs.saturating_sub(trainer.epoch as usize);
    let mut history = TrainHistory::default();
    let eval = (cfg.eval_every > 0).then_some(&test_ds);
    trainer.run(&train_ds, eval, remaining, &mut history)?;

    create_dir(out)?;
    let files = [
        out.join(CHECKPOINT_FILE),
        out.join(HISTORY_FILE),
        out.join(EPOCHS_FILE),
    ];
    save_checkpoint(&files[0], &trainer.checkpoint())?;
    write_jsonl(&files[1], &history.steps)?;
    write_jsonl(&files[2], &history.epochs)?;

    let mut summary = format!(
        "trained steps {}..{} (epoch {} of {}) on {} samples / {} classes",
        start_step,
        trainer.step,
        trainer.epoch,
        cfg.epochs,
        train_ds.len(),
        train_ds.num_classes()
    );
    if let Some(loss) = history.final_epoch_loss() {
        summary += &format!("\nfinal epoch loss {loss:.4}");
    }
    if history.stopped_early {
        summary += "\nstopped early on a loss plateau";
    }
    if history.skipped_steps > 0 {
        summary += &format!("\n{} degenerate steps skipped", history.skipped_steps);
    }
    Ok((files.to_vec(), summary))
}

/// One line of `eval.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum EvalRecord {
    Retrieval {
        metric: String,
        /// `(K, recall)` in increasing K.
        recall_at_k: Vec<(usize, f64)>,
        queries: usize,
        excluded: Vec<usize>,
        clamped: Vec<(usize, usize)>,
    },
    Distribution(DistributionReport),
    Ncm {
        features: String,
        accuracy: f64,
    },
    /// A metric that could not be computed for this model.
    Unavailable {
        metric: String,
        reason: String,
    },
}

fn is_degenerate(e: &pddm_core::Error) -> bool {
    matches!(
        e,
        pddm_core::Error::DegenerateBranch { .. } | pddm_core::Error::DegenerateNorm { .. }
    )
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    ks: &[usize],
    split: Split,
    out: &Path,
) -> Result<(Vec<PathBuf>, String)> {
    ensure!(
        !ks.is_empty() && !ks.contains(&0),
        "--ks must be a non-empty list of positive integers"
    );
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    let input_dim = ckpt.model.embedding.dims()[0];
    if ds.dim() != input_dim {
        bail!(
            "checkpoint expects {input_dim}-dimensional inputs but {} has dimension {}",
            data.display(),
            ds.dim()
        );
    }
    let ds = match split {
        Split::All => ds,
        Split::Train | Split::Test => {
            let (tr, te) =
                split_disjoint_classes(&ds, ckpt.config.train_fraction, ckpt.config.seed)?;
            if split == Split::Train {
                tr
            } else {
                te
            }
        }
    };
    let model = &ckpt.model;
    let feats = model.embed_all(&ds.features())?;
    let labels = ds.labels();

    let mut records = Vec::new();
    let mut summary = format!("{} queries from {} classes", ds.len(), ds.num_classes());
    for metric in [Metric::Euclidean, Metric::Pddm(&model.pddm)] {
        let name = metric.name();
        let retrieval = recall_at_k(&feats, &labels, ks, metric);
        let distribution = retrieval
            .as_ref()
            .ok()
            .map(|_| score_distribution(&feats, &labels, metric, DISTRIBUTION_BINS));
        let (r, d) = match (retrieval, distribution) {
            (Ok(r), Some(Ok(d))) => (r, d),
            (Err(e), _) | (_, Some(Err(e)))
                if matches!(metric, Metric::Pddm(_)) && is_degenerate(&e) =>
            {
                log::warn!("{name} metric unavailable: {e}");
                summary += &format!("\n{name:<10} unavailable: {e}");
                records.push(EvalRecord::Unavailable {
                    metric: name.into(),
                    reason: e.to_string(),
                });
                continue;
            }
            (Err(e), _) | (_, Some(Err(e))) => return Err(e.into()),
            (Ok(_), None) => unreachable!("distribution is computed whenever retrieval succeeds"),
        };
        let row: Vec<String> = r
            .recall_at_k
            .iter()
            .map(|(k, v)| format!("R@{k} {v:.3}"))
            .collect();
        summary += &format!("\n{name:<10} {}  overlap {:.3}", row.join("  "), d.overlap);
        records.push(EvalRecord::Retrieval {
            metric: r.metric,
            recall_at_k: r.recall_at_k.into_iter().collect(),
            queries: r.queries,
            excluded: r.excluded,
            clamped: r.clamped,
        });
        records.push(EvalRecord::Distribution(d));
    }
    for (name, acc) in [
        (
            "embedding",
            ncm_transfer_accuracy(&feats, &labels, NCM_FIT_FRACTION)?,
        ),
        (
            "raw",
            ncm_transfer_accuracy(&ds.features(), &labels, NCM_FIT_FRACTION)?,
        ),
    ] {
        summary += &format!("\nNCM on {name} features {acc:.3}");
        records.push(EvalRecord::Ncm {
            features: name.into(),
            accuracy: acc,
        });
    }

    create_dir(out)?;
    let path = out.join(EVAL_FILE);
    write_jsonl(&path, &records)?;
    Ok((vec![path], summary))
}

/// One line of `compare.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum CompareRecord {
    Arm {
        miner: String,
        final_loss: f64,
        recall_euclidean: Vec<(usize, f64)>,
        recall_pddm: Option<Vec<(usize, f64)>>,
        overlap_pddm: Option<f64>,
        overlap_euclidean: f64,
        mining_precision: f64,
        skipped_steps: u64,
    },
    Summary(ComparisonSummary),
}

fn arm_record(arm: &Arm) -> CompareRecord {
    let e = &arm.final_eval;
    CompareRecord::Arm {
        miner: miner_name(arm),
        final_loss: arm.history.final_epoch_loss().unwrap_or(f64::NAN),
        recall_euclidean: e.recall_euclidean.clone(),
        recall_pddm: e.recall_pddm.clone(),
        overlap_pddm: e.overlap_pddm,
        overlap_euclidean: e.overlap_euclidean,
        mining_precision: arm.mean_mining_precision(),
        skipped_steps: arm.history.skipped_steps,
    }
}

fn miner_name(arm: &Arm) -> String {
    serde_json::to_value(arm.miner)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn compare(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<(Vec<PathBuf>, String)> {
    cfg.validate()?;
    let ds = load_data(data)?;
    let (train_ds, test_ds) = split_disjoint_classes(&ds, cfg.train_fraction, cfg.seed)?;
    let c = mine_compare(&train_ds, &test_ds, cfg)?;
    let mut outputs = Vec::new();
    for arm in [&c.pddm, &c.euclidean] {
        let dir = out.join(miner_name(arm));
        create_dir(&dir)?;
        let (ck, h, e) = (
            dir.join(CHECKPOINT_FILE),
            dir.join(HISTORY_FILE),
            dir.join(EPOCHS_FILE),
        );
        save_checkpoint(&ck, &arm.trainer.checkpoint())?;
        write_jsonl(&h, &arm.history.steps)?;
        write_jsonl(&e, &arm.history.epochs)?;
        outputs.extend([ck, h, e]);
    }
    let s = c.summary();
    let path = out.join(COMPARE_FILE);
    write_jsonl(
        &path,
        [
            arm_record(&c.pddm),
            arm_record(&c.euclidean),
            CompareRecord::Summary(s.clone()),
        ],
    )?;
    outputs.push(path);

    let reach = match s.pddm_epochs_to_euclidean_final {
        Some(e) => format!("after {e} of {} epochs", s.epochs),
        None => "never".into(),
    };
    let summary = format!(
        "final loss      pddm {:.4}  euclidean {:.4}\n\
         recall@1        pddm {:.3}  euclidean {:.3}\n\
         mining precision pddm {:.3}  euclidean {:.3}\n\
         pddm arm reached the euclidean final loss: {reach}",
        s.pddm_final_loss,
        s.euclidean_final_loss,
        s.pddm_recall_at_1,
        s.euclidean_recall_at_1,
        s.pddm_mining_precision,
        s.euclidean_mining_precision,
    );
    Ok((outputs, summary))
}
