//! Labeled feature datasets: synthetic heterogeneous clusters, CSV/JSONL
//! ingestion and disjoint-class splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::euclidean_distance;

pub type Label = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub label: Label,
    pub features: Vec<f64>,
}

/// An immutable, validated set of samples with a uniform feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    classes: BTreeMap<Label, Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let dim = samples
            .first()
            .ok_or(Error::Empty("dataset"))?
            .features
            .len();
        if dim == 0 {
            return Err(Error::InvalidRow {
                row: 1,
                reason: "no feature columns".into(),
            });
        }
        let mut ids = HashSet::with_capacity(samples.len());
        let mut classes: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (idx, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::InvalidRow {
                    row: idx + 1,
                    reason: format!("expected {dim} features, found {}", s.features.len()),
                });
            }
            if let Some(pos) = s.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidRow {
                    row: idx + 1,
                    reason: format!("feature f{pos} is not finite"),
                });
            }
            if !ids.insert(s.id) {
                return Err(Error::DuplicateId {
                    id: s.id,
                    row: idx + 1,
                });
            }
            classes.entry(s.label).or_default().push(idx);
        }
        Ok(Self {
            samples,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, idx: usize) -> &Sample {
        &self.samples[idx]
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    /// Class label → sample indices, in label order.
    pub fn classes(&self) -> &BTreeMap<Label, Vec<usize>> {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Keeps the samples whose label is in `labels`, preserving order.
    pub fn filter_classes(&self, labels: &BTreeSet<Label>) -> Result<Self> {
        Self::new(
            self.samples
                .iter()
                .filter(|s| labels.contains(&s.label))
                .cloned()
                .collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.id.to_string(), s.label.to_string()];
            row.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Largest positive-pair distance and smallest negative-pair distance over
/// all pairs. The data is heterogeneous when the first exceeds the second.
pub fn heterogeneity_gap(ds: &Dataset) -> Result<(f64, f64)> {
    let mut max_pos = f64::NEG_INFINITY;
    let mut min_neg = f64::INFINITY;
    let s = ds.samples();
    for a in 0..s.len() {
        for b in a + 1..s.len() {
            let d = euclidean_distance(&s[a].features, &s[b].features)?;
            if s[a].label == s[b].label {
                max_pos = max_pos.max(d);
            } else {
                min_neg = min_neg.min(d);
            }
        }
    }
    Ok((max_pos, min_neg))
}

pub fn is_heterogeneous(ds: &Dataset) -> Result<bool> {
    let (max_pos, min_neg) = heterogeneity_gap(ds)?;
    Ok(max_pos > min_neg)
}

/// Synthetic benchmark layout.
///
/// The first `informative_dims` coordinates carry class structure: half of
/// the classes are tight Gaussians packed closely together (the dense
/// region), the other half are wide Gaussians far apart (the sparse region),
/// with both regions using the same center-separation to spread ratio. The
/// remaining coordinates are class-independent Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of dense-region classes.
    pub dense_region_spread: f64,
    /// Per-coordinate standard deviation of sparse-region classes.
    pub sparse_region_spread: f64,
    /// Distance between neighbouring dense-region class centers.
    pub dense_center_separation: f64,
    /// Number of leading coordinates that carry class structure; 0 means `dim / 2` (at least 2).
    pub informative_dims: usize,
    /// Standard deviation of the class-independent coordinates.
    pub nuisance_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 32,
            dim: 8,
            dense_region_spread: 0.05,
            sparse_region_spread: 0.6,
            dense_center_separation: 0.3,
            informative_dims: 0,
            nuisance_spread: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn effective_informative_dims(&self) -> usize {
        if self.informative_dims == 0 {
            (self.dim / 2).max(2).min(self.dim)
        } else {
            self.informative_dims
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes < 4 {
            return bad(format!("n_classes must be >= 4, got {}", self.n_classes));
        }
        if self.samples_per_class < 2 {
            return bad(format!(
                "samples_per_class must be >= 2, got {}",
                self.samples_per_class
            ));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.effective_informative_dims() > self.dim {
            return bad(format!(
                "informative_dims {} exceeds dim {}",
                self.informative_dims, self.dim
            ));
        }
        for (name, v) in [
            ("dense_region_spread", self.dense_region_spread),
            ("sparse_region_spread", self.sparse_region_spread),
            ("dense_center_separation", self.dense_center_separation),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.nuisance_spread >= 0.0 && self.nuisance_spread.is_finite()) {
            return bad(format!(
                "nuisance_spread must be >= 0, got {}",
                self.nuisance_spread
            ));
        }
        if self.dense_region_spread >= self.sparse_region_spread {
            return bad("dense_region_spread must be smaller than sparse_region_spread".into());
        }
        Ok(())
    }
}

/// `count` centers in `k` dims with nearest-neighbour spacing `sep`: the
/// signed coordinate axes first (`±sep/√2 · e_a`), then random directions.
fn region_centers(count: usize, k: usize, sep: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let r = sep / std::f64::consts::SQRT_2;
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    (0..count)
        .map(|c| {
            if c < 2 * k {
                let mut v = vec![0.0; k];
                v[c / 2] = if c % 2 == 0 { r } else { -r };
                v
            } else {
                let g: Vec<f64> = (0..k).map(|_| unit.sample(rng)).collect();
                let n = crate::math::norm(&g).max(1e-12);
                g.iter().map(|x| x * r / n).collect()
            }
        })
        .collect()
}

/// Generates the heterogeneous benchmark and checks that some positive pair
/// is farther apart than some negative pair.
pub fn synth_heterogeneous(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.effective_informative_dims();
    let n_dense = cfg.n_classes / 2;
    let n_sparse = cfg.n_classes - n_dense;
    let ratio = cfg.sparse_region_spread / cfg.dense_region_spread;
    let sparse_sep = cfg.dense_center_separation * ratio;

    let dense_centers = region_centers(n_dense, k, cfg.dense_center_separation, &mut rng);
    let sparse_local = region_centers(n_sparse, k, sparse_sep, &mut rng);
    // Move the sparse region well clear of the dense one along the diagonal.
    let sparse_extent =
        sparse_sep / std::f64::consts::SQRT_2 + 4.0 * cfg.sparse_region_spread * (k as f64).sqrt();
    let offset = 2.0 * sparse_extent / (k as f64).sqrt();
    let sparse_centers: Vec<Vec<f64>> = sparse_local
        .into_iter()
        .map(|c| c.into_iter().map(|x| x + offset).collect())
        .collect();

    let nuisance = Normal::new(0.0, cfg.nuisance_spread.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    let mut id = 0u64;
    for class in 0..cfg.n_classes {
        let (center, spread) = if class < n_dense {
            (&dense_centers[class], cfg.dense_region_spread)
        } else {
            (&sparse_centers[class - n_dense], cfg.sparse_region_spread)
        };
        let noise = Normal::new(0.0, spread).expect("valid std");
        for _ in 0..cfg.samples_per_class {
            let mut x: Vec<f64> = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            x.extend((k..cfg.dim).map(|_| {
                if cfg.nuisance_spread > 0.0 {
                    nuisance.sample(&mut rng)
                } else {
                    0.0
                }
            }));
            samples.push(Sample {
                id,
                label: class as Label,
                features: x,
            });
            id += 1;
        }
    }
    let ds = Dataset::new(samples)?;
    let (max_pos, min_neg) = heterogeneity_gap(&ds)?;
    if max_pos <= min_neg {
        return Err(Error::PhenomenonNotAchieved(format!(
            "largest intraclass distance {max_pos:.4} does not exceed smallest interclass distance {min_neg:.4}; \
             increase sparse_region_spread or decrease dense_center_separation"
        )));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    /// One JSON object per line: `{"id": .., "label": .., "features": [..]}`.
    Jsonl,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => Self::Jsonl,
            _ => Self::Csv,
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    match format {
        DataFormat::Csv => read_csv(reader),
        DataFormat::Jsonl => read_jsonl(reader),
    }
}

/// Parses `id,label,f0,...` CSV. Row numbers in errors are file line numbers.
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected: Vec<String> = ["id", "label"].iter().map(|s| s.to_string()).collect();
    if header.len() < 3
        || header
            .iter()
            .take(2)
            .ne(expected.iter().map(|s| s.as_str()))
    {
        return Err(Error::InvalidRow {
            row: 1,
            reason: "header must be id,label,f0,...".into(),
        });
    }
    let dim = header.len() - 2;
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 2;
        let record = record.map_err(|e| Error::InvalidRow {
            row,
            reason: e.to_string(),
        })?;
        if record.len() != dim + 2 {
            return Err(Error::InvalidRow {
                row,
                reason: format!("expected {} columns, found {}", dim + 2, record.len()),
            });
        }
        let parse_int = |col: usize, name: &str| -> Result<u64> {
            record[col]
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidRow {
                    row,
                    reason: format!("{name} {:?} is not a non-negative integer", &record[col]),
                })
        };
        let id = parse_int(0, "id")?;
        let label = Label::try_from(parse_int(1, "label")?).map_err(|_| Error::InvalidRow {
            row,
            reason: "label out of range".into(),
        })?;
        let features = (0..dim)
            .map(|k| {
                let raw = record[k + 2].trim();
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) => Err(Error::InvalidRow {
                        row,
                        reason: format!("feature f{k} is not finite ({raw})"),
                    }),
                    Err(_) => Err(Error::InvalidRow {
                        row,
                        reason: format!("feature f{k} {raw:?} is not a number"),
                    }),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if !ids.insert(id) {
            return Err(Error::DuplicateId { id, row });
        }
        samples.push(Sample {
            id,
            label,
            features,
        });
    }
    Dataset::new(samples)
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut samples: Vec<Sample> = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::InvalidRow {
            row,
            reason: e.to_string(),
        })?;
        if let Some(first) = samples.first() {
            if first.features.len() != sample.features.len() {
                return Err(Error::InvalidRow {
                    row,
                    reason: format!(
                        "expected {} features, found {}",
                        first.features.len(),
                        sample.features.len()
                    ),
                });
            }
        }
        if sample.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRow {
                row,
                reason: "non-finite feature".into(),
            });
        }
        if !ids.insert(sample.id) {
            return Err(Error::DuplicateId { id: sample.id, row });
        }
        samples.push(sample);
    }
    Dataset::new(samples)
}

/// Splits by class: the two sides share no label. `floor(fraction · classes)`
/// classes go to training, with at least one class on each side.
pub fn split_disjoint_classes(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let n = ds.num_classes();
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes to split, found {n}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut labels: Vec<Label> = ds.classes().keys().copied().collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let train: BTreeSet<Label> = labels[..n_train].iter().copied().collect();
    let test: BTreeSet<Label> = labels[n_train..].iter().copied().collect();
    Ok((ds.filter_classes(&train)?, ds.filter_classes(&test)?))
}
