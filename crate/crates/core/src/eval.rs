//! Retrieval and transfer evaluation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{check_len, Error, Result};
use crate::math::euclidean_distance;
use crate::pddm::{self, PddmParams};

/// How neighbours are ranked.
#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    /// Ascending Euclidean distance.
    Euclidean,
    /// Descending raw PDDM score. Min-max normalization would not change the order.
    Pddm(&'a PddmParams),
}

impl Metric<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Pddm(_) => "pddm",
        }
    }

    /// Larger is more similar.
    fn similarity(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Euclidean => euclidean_distance(a, b).map(|d| -d),
            Metric::Pddm(p) => pddm::score(a, b, p),
        }
    }
}

/// Symmetric matrix of pairwise similarities (diagonal unused).
fn similarity_matrix<F: AsRef<[f64]> + Sync>(
    features: &[F],
    metric: Metric<'_>,
) -> Result<Vec<Vec<f64>>> {
    let n = features.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            (a + 1..n)
                .map(|b| metric.similarity(features[a].as_ref(), features[b].as_ref()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut sim = vec![vec![0.0; n]; n];
    for a in 0..n {
        for (off, &s) in upper[a].iter().enumerate() {
            let b = a + 1 + off;
            sim[a][b] = s;
            sim[b][a] = s;
        }
    }
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub metric: String,
    /// K → fraction of evaluated queries with a same-class item in the top K.
    pub recall_at_k: BTreeMap<usize, f64>,
    /// Number of queries that counted towards recall.
    pub queries: usize,
    /// Queries without any same-class item in the gallery.
    pub excluded: Vec<usize>,
    /// Requested K values that exceeded the gallery size, with the value used.
    pub clamped: Vec<(usize, usize)>,
    /// Top-`max K` neighbours of each query (empty for excluded queries).
    pub neighbors: Vec<Vec<usize>>,
}

/// Leave-one-out Recall@K: every sample queries all the others.
pub fn recall_at_k<F: AsRef<[f64]> + Sync>(
    features: &[F],
    labels: &[Label],
    ks: &[usize],
    metric: Metric<'_>,
) -> Result<RetrievalResult> {
    check_len(
        "recall_at_k",
        "features",
        features.len(),
        "labels",
        labels.len(),
    )?;
    let n = features.len();
    if n < 2 {
        return Err(Error::Empty("retrieval needs at least 2 samples"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!(
            "K values must be positive, got {ks:?}"
        )));
    }
    let gallery = n - 1;
    let mut clamped = Vec::new();
    let effective: Vec<(usize, usize)> = ks
        .iter()
        .map(|&k| {
            if k > gallery {
                log::warn!("K={k} exceeds gallery size {gallery}; clamping");
                clamped.push((k, gallery));
                (k, gallery)
            } else {
                (k, k)
            }
        })
        .collect();
    let max_k = effective.iter().map(|&(_, e)| e).max().unwrap_or(1);

    let sim = similarity_matrix(features, metric)?;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut order: Vec<usize> = (0..n).filter(|&c| c != q).collect();
            order.sort_by(|&a, &b| {
                sim[q][b]
                    .partial_cmp(&sim[q][a])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order.truncate(max_k);
            order
        })
        .collect();

    let mut excluded = Vec::new();
    let mut hits = vec![0usize; effective.len()];
    let mut queries = 0usize;
    let mut ranked = Vec::with_capacity(n);
    for (q, top) in neighbors.into_iter().enumerate() {
        if !(0..n).any(|c| c != q && labels[c] == labels[q]) {
            excluded.push(q);
            ranked.push(Vec::new());
            continue;
        }
        queries += 1;
        let first_hit = top.iter().position(|&c| labels[c] == labels[q]);
        for (h, &(_, k)) in hits.iter_mut().zip(&effective) {
            if first_hit.is_some_and(|pos| pos < k) {
                *h += 1;
            }
        }
        ranked.push(top);
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} queries have no same-class item and were excluded",
            excluded.len()
        );
    }
    let recall_at_k = effective
        .iter()
        .zip(&hits)
        .map(|(&(k, _), &h)| {
            (
                k,
                if queries == 0 {
                    0.0
                } else {
                    h as f64 / queries as f64
                },
            )
        })
        .collect();
    Ok(RetrievalResult {
        metric: metric.name().to_string(),
        recall_at_k,
        queries,
        excluded,
        clamped,
        neighbors: ranked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub metric: String,
    pub bins: usize,
    /// Normalized to sum to 1 over `[0, 1]`.
    pub positive_hist: Vec<f64>,
    pub negative_hist: Vec<f64>,
    /// Histogram intersection `Σ min(p, n)`.
    pub overlap: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Logistic center for the Euclidean transform (median pairwise distance).
    pub logistic_center: Option<f64>,
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() || bins == 0 {
        return h;
    }
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let total = values.len() as f64;
    h.iter_mut().for_each(|x| *x /= total);
    h
}

pub fn histogram_intersection(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a.min(*b)).sum()
}

/// Overlap of two `[0, 1]`-valued samples under shared binning.
pub fn histogram_overlap(positives: &[f64], negatives: &[f64], bins: usize) -> f64 {
    histogram_intersection(&histogram(positives, bins), &histogram(negatives, bins))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Positive/negative similarity histograms on `[0, 1]`.
///
/// PDDM scores are min-max normalized over all pairs; Euclidean distances go
/// through `1 / (1 + exp(D − c))` with `c` the median pairwise distance.
pub fn score_distribution<F: AsRef<[f64]> + Sync>(
    features: &[F],
    labels: &[Label],
    metric: Metric<'_>,
    bins: usize,
) -> Result<DistributionReport> {
    check_len(
        "score_distribution",
        "features",
        features.len(),
        "labels",
        labels.len(),
    )?;
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let n = features.len();
    let sim = similarity_matrix(features, metric)?;
    let mut values = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut positive = Vec::with_capacity(values.capacity());
    for a in 0..n {
        for b in a + 1..n {
            values.push(sim[a][b]);
            positive.push(labels[a] == labels[b]);
        }
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_neg == 0 {
        return Err(Error::Empty(
            "score distribution needs at least one negative pair",
        ));
    }
    if n_pos == 0 {
        return Err(Error::Empty(
            "score distribution needs at least one positive pair",
        ));
    }

    let (mapped, center): (Vec<f64>, Option<f64>) = match metric {
        Metric::Euclidean => {
            let mut dists: Vec<f64> = values.iter().map(|s| -s).collect();
            let c = median(&mut dists.clone());
            dists
                .iter_mut()
                .for_each(|d| *d = 1.0 / (1.0 + (*d - c).exp()));
            (dists, Some(c))
        }
        Metric::Pddm(_) => {
            let scaling = pddm::ScoreScaling::from_scores(&values)?;
            (values.iter().map(|&s| scaling.apply(s)).collect(), None)
        }
    };
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (v, p) in mapped.into_iter().zip(positive) {
        if p {
            pos.push(v)
        } else {
            neg.push(v)
        }
    }
    let positive_hist = histogram(&pos, bins);
    let negative_hist = histogram(&neg, bins);
    let overlap = histogram_intersection(&positive_hist, &negative_hist);
    Ok(DistributionReport {
        metric: metric.name().to_string(),
        bins,
        positive_hist,
        negative_hist,
        overlap,
        positive_pairs: n_pos,
        negative_pairs: n_neg,
        logistic_center: center,
    })
}

/// Per-class mean features, ordered by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub labels: Vec<Label>,
    pub means: Vec<Vec<f64>>,
}

pub fn ncm_fit<F: AsRef<[f64]>>(features: &[F], labels: &[Label]) -> Result<ClassMeans> {
    check_len(
        "ncm_fit",
        "features",
        features.len(),
        "labels",
        labels.len(),
    )?;
    if features.is_empty() {
        return Err(Error::Empty("ncm_fit needs at least one sample"));
    }
    let dim = features[0].as_ref().len();
    let mut sums: BTreeMap<Label, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &y) in features.iter().zip(labels) {
        let f = f.as_ref();
        check_len("ncm_fit", "feature", f.len(), "dim", dim)?;
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(f) {
            *s += v;
        }
        entry.1 += 1;
    }
    let (labels, means) = sums
        .into_iter()
        .map(|(y, (s, c))| (y, s.into_iter().map(|v| v / c as f64).collect()))
        .unzip();
    Ok(ClassMeans { labels, means })
}

/// Nearest class mean; ties go to the lowest label.
pub fn ncm_classify(f: &[f64], means: &ClassMeans) -> Result<Label> {
    let mut best: Option<(Label, f64)> = None;
    for (&y, m) in means.labels.iter().zip(&means.means) {
        let d = euclidean_distance(f, m)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((y, d));
        }
    }
    best.map(|(y, _)| y)
        .ok_or(Error::Empty("ncm_classify needs at least one class"))
}

pub fn ncm_accuracy<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[Label],
    means: &ClassMeans,
) -> Result<f64> {
    check_len(
        "ncm_accuracy",
        "features",
        features.len(),
        "labels",
        labels.len(),
    )?;
    if features.is_empty() {
        return Err(Error::Empty("ncm_accuracy needs at least one query"));
    }
    let mut correct = 0usize;
    for (f, &y) in features.iter().zip(labels) {
        if ncm_classify(f.as_ref(), means)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

/// Transfer protocol on unseen classes: the first `fit_fraction` of each
/// class's samples (in dataset order, at least one) estimate the class means,
/// the rest are classified.
pub fn ncm_transfer_accuracy<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[Label],
    fit_fraction: f64,
) -> Result<f64> {
    check_len(
        "ncm_transfer_accuracy",
        "features",
        features.len(),
        "labels",
        labels.len(),
    )?;
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let (mut fit, mut query) = (Vec::new(), Vec::new());
    for idx in by_class.values() {
        let n_fit = ((fit_fraction * idx.len() as f64).floor() as usize).clamp(1, idx.len());
        fit.extend_from_slice(&idx[..n_fit]);
        query.extend_from_slice(&idx[n_fit..]);
    }
    let pick = |set: &[usize]| -> (Vec<&[f64]>, Vec<Label>) {
        set.iter()
            .map(|&i| (features[i].as_ref(), labels[i]))
            .unzip()
    };
    let (fit_f, fit_y) = pick(&fit);
    let (q_f, q_y) = pick(&query);
    let means = ncm_fit(&fit_f, &fit_y)?;
    ncm_accuracy(&q_f, &q_y, &means)
}
