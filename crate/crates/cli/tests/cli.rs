use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pddm_cli::{read_jsonl, CompareRecord, EvalRecord, RunManifest};
use pddm_core::trainer::{EpochRecord, StepRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pddm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pddm"))
        .args(args)
        .output()
        .expect("spawn pddm")
}

fn ok(args: &[&str]) -> String {
    let out = pddm(args);
    assert!(
        out.status.success(),
        "pddm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_TRAIN: &str = "version = 1\nbatch_size = 16\nembedding_dim = 8\nhidden_dims = [12]\nlr = 0.01\ndropout_p = 0.0\nepochs = 2\n";

struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    train_cfg: PathBuf,
}

fn fixture(train_toml: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth.toml");
    fs::write(&synth, "version = 1\nseed = 3\n").unwrap();
    let data = dir.path().join("data.csv");
    ok(&["gen-data", "--config", s(&synth), "--out", s(&data)]);
    let train_cfg = dir.path().join("train.toml");
    fs::write(&train_cfg, train_toml).unwrap();
    Fixture {
        dir,
        data,
        train_cfg,
    }
}

#[test]
fn gen_data_writes_every_sample_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    fs::write(&cfg, "version = 1\nn_classes = 6\nsamples_per_class = 5\n").unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    let text = fs::read_to_string(&a).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("id,label,f0,"));
    assert_eq!(lines.count(), 30);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.manifest.json").exists());

    let c = dir.path().join("c.csv");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&c),
        "--seed",
        "9",
    ]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn gen_data_reports_a_missing_phenomenon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    fs::write(
        &cfg,
        "version = 1\ndense_region_spread = 0.01\nsparse_region_spread = 0.011\ndense_center_separation = 5.0\nnuisance_spread = 0.0\n",
    )
    .unwrap();
    let out = pddm(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("heterogeneity"), "{err}");
}

#[test]
fn unknown_config_key_is_named() {
    let f = fixture("version = 1\nlearning_rate = 0.1\n");
    let out = pddm(&[
        "train",
        "--config",
        s(&f.train_cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&f.dir.path().join("run")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_then_resume_continues_step_numbering() {
    let f = fixture(TINY_TRAIN);
    let first = f.dir.path().join("first");
    ok(&[
        "train",
        "--config",
        s(&f.train_cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&first),
    ]);
    assert!(first.join("checkpoint.ckpt").exists());
    let steps: Vec<StepRecord> = read_jsonl(&first.join("history.jsonl")).unwrap();
    assert!(!steps.is_empty());
    assert!(steps.windows(2).all(|w| w[1].step > w[0].step));
    let epochs: Vec<EpochRecord> = read_jsonl(&first.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.len(), 2);

    // Extend the same run to four epochs.
    let longer = f.dir.path().join("longer.toml");
    fs::write(&longer, TINY_TRAIN.replace("epochs = 2", "epochs = 4")).unwrap();
    let second = f.dir.path().join("second");
    ok(&[
        "train",
        "--config",
        s(&longer),
        "--data",
        s(&f.data),
        "--out",
        s(&second),
        "--checkpoint",
        s(&first.join("checkpoint.ckpt")),
    ]);
    let resumed: Vec<StepRecord> = read_jsonl(&second.join("history.jsonl")).unwrap();
    assert!(resumed[0].step > steps.last().unwrap().step);
    assert_eq!(resumed[0].epoch, 2);

    // Resuming reproduces an uninterrupted run exactly.
    let straight = f.dir.path().join("straight");
    ok(&[
        "train",
        "--config",
        s(&longer),
        "--data",
        s(&f.data),
        "--out",
        s(&straight),
    ]);
    assert_eq!(
        fs::read(second.join("checkpoint.ckpt")).unwrap(),
        fs::read(straight.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_architecture() {
    let f = fixture(TINY_TRAIN);
    let first = f.dir.path().join("first");
    ok(&[
        "train",
        "--config",
        s(&f.train_cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&first),
    ]);
    let wider = f.dir.path().join("wider.toml");
    fs::write(&wider, TINY_TRAIN.replace("[12]", "[13]")).unwrap();
    let out = pddm(&[
        "train",
        "--config",
        s(&wider),
        "--data",
        s(&f.data),
        "--out",
        s(&f.dir.path().join("x")),
        "--checkpoint",
        s(&first.join("checkpoint.ckpt")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn eval_reports_both_metrics() {
    let f = fixture(TINY_TRAIN);
    let run = f.dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&f.train_cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&run),
    ]);
    let out = f.dir.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--data",
        s(&f.data),
        "--ks",
        "1,2,4,8",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("euclidean") && stdout.contains("pddm"));

    let records: Vec<EvalRecord> = read_jsonl(&out.join("eval.jsonl")).unwrap();
    let mut metrics = Vec::new();
    for r in &records {
        if let EvalRecord::Retrieval {
            metric,
            recall_at_k,
            ..
        } = r
        {
            assert_eq!(
                recall_at_k.iter().map(|(k, _)| *k).collect::<Vec<_>>(),
                vec![1, 2, 4, 8]
            );
            assert!(recall_at_k.windows(2).all(|w| w[1].1 >= w[0].1));
            metrics.push(metric.clone());
        }
    }
    assert_eq!(metrics, ["euclidean", "pddm"]);
    assert_eq!(
        records
            .iter()
            .filter(|r| matches!(r, EvalRecord::Distribution(_)))
            .count(),
        2
    );
    assert_eq!(
        records
            .iter()
            .filter(|r| matches!(r, EvalRecord::Ncm { .. }))
            .count(),
        2
    );
}

#[test]
fn eval_rejects_mismatched_data() {
    let f = fixture(TINY_TRAIN);
    let run = f.dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&f.train_cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&run),
    ]);
    let other_cfg = f.dir.path().join("other.toml");
    fs::write(&other_cfg, "version = 1\ndim = 5\n").unwrap();
    let other = f.dir.path().join("other.csv");
    ok(&["gen-data", "--config", s(&other_cfg), "--out", s(&other)]);
    let out = pddm(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--data",
        s(&other),
        "--out",
        s(&f.dir.path().join("e")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn untrained_model_retrieves_at_chance_on_unstructured_data() {
    // Labels drawn independently of the features: no embedding can beat chance.
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n_classes, per_class, dim) = (8usize, 16usize, 6usize);
    let mut csv = String::from("id,label");
    for d in 0..dim {
        csv += &format!(",f{d}");
    }
    csv.push('\n');
    for i in 0..n_classes * per_class {
        csv += &format!("{i},{}", i % n_classes);
        for _ in 0..dim {
            csv += &format!(",{}", rng.random_range(-1.0..1.0));
        }
        csv.push('\n');
    }
    let data = dir.path().join("noise.csv");
    fs::write(&data, csv).unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "version = 1\nepochs = 0\nbatch_size = 16\n").unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    let out = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--data",
        s(&data),
        "--split",
        "all",
        "--ks",
        "1",
        "--out",
        s(&out),
    ]);

    // A uniformly random neighbour shares the query's class with this probability.
    let chance = (per_class - 1) as f64 / (n_classes * per_class - 1) as f64;
    let records: Vec<EvalRecord> = read_jsonl(&out.join("eval.jsonl")).unwrap();
    let r1 = records
        .iter()
        .find_map(|r| match r {
            EvalRecord::Retrieval {
                metric,
                recall_at_k,
                ..
            } if metric == "euclidean" => Some(recall_at_k[0].1),
            _ => None,
        })
        .unwrap();
    assert!(
        (r1 - chance).abs() < 0.1,
        "recall@1 {r1} vs chance {chance}"
    );
}

#[test]
fn mine_compare_writes_paired_histories() {
    let f = fixture(TINY_TRAIN);
    let out = f.dir.path().join("cmp");
    let stdout = ok(&[
        "mine-compare",
        "--config",
        s(&f.train_cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("recall@1"));
    let grid = |arm: &str| -> Vec<(u64, u64)> {
        let steps: Vec<StepRecord> = read_jsonl(&out.join(arm).join("history.jsonl")).unwrap();
        steps.iter().map(|s| (s.epoch, s.step)).collect()
    };
    assert!(!grid("pddm").is_empty());
    assert_eq!(grid("pddm"), grid("euclidean"));

    let records: Vec<CompareRecord> = read_jsonl(&out.join("compare.jsonl")).unwrap();
    let arms: Vec<&str> = records
        .iter()
        .filter_map(|r| match r {
            CompareRecord::Arm {
                miner,
                recall_euclidean,
                ..
            } => {
                assert!(recall_euclidean.iter().any(|(k, _)| *k == 1));
                Some(miner.as_str())
            }
            _ => None,
        })
        .collect();
    assert_eq!(arms, ["pddm", "euclidean"]);
    let summary = records.iter().find_map(|r| match r {
        CompareRecord::Summary(s) => Some(s),
        _ => None,
    });
    let summary = summary.expect("summary record");
    assert!(summary.pddm_recall_at_1.is_finite() && summary.euclidean_recall_at_1.is_finite());
}

#[test]
fn rerun_reproduces_a_training_run() {
    let f = fixture(TINY_TRAIN);
    let first = f.dir.path().join("first");
    ok(&[
        "train",
        "--config",
        s(&f.train_cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&first),
        "--seed",
        "4",
    ]);
    let manifest = RunManifest::read(&first.join("manifest.json")).unwrap();
    assert_eq!(manifest.inputs.len(), 1);
    let second = f.dir.path().join("second");
    ok(&[
        "rerun",
        "--manifest",
        s(&first.join("manifest.json")),
        "--out",
        s(&second),
    ]);
    for file in ["checkpoint.ckpt", "history.jsonl", "epochs.jsonl"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file}"
        );
    }

    // A modified input invalidates the manifest.
    fs::write(&f.data, fs::read_to_string(&f.data).unwrap() + "\n").unwrap();
    let out = pddm(&[
        "rerun",
        "--manifest",
        s(&first.join("manifest.json")),
        "--out",
        s(&f.dir.path().join("third")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}

#[test]
fn missing_data_file_fails_cleanly() {
    let f = fixture(TINY_TRAIN);
    let out = pddm(&[
        "train",
        "--config",
        s(&f.train_cfg),
        "--data",
        "/nonexistent.csv",
        "--out",
        s(&f.dir.path().join("r")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent.csv"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap();
        if name.starts_with("synth-") {
            pddm_cli::config::read_config::<pddm_core::SynthConfig>(&path).unwrap();
        } else if name.starts_with("train-") {
            pddm_cli::config::read_config::<pddm_core::TrainConfig>(&path).unwrap();
        }
    }
    let defaults: pddm_core::TrainConfig =
        pddm_cli::config::read_config(&root.join("train-default.toml")).unwrap();
    assert_eq!(defaults, pddm_core::TrainConfig::default());
}
