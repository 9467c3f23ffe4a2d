//! Online hard-quadruplet mining inside a mini-batch.
//!
//! The hard positive pair `(î, ĵ)` is the least similar positive pair; the
//! hard negatives `k̂`, `l̂` are the most similar negatives of `î` and `ĵ`.
//! Only `|P̂|` positive scores plus the two negative rows are evaluated.
//! Ties resolve to the lowest index (lexicographic on pairs).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::euclidean_distance;
use crate::pddm::{self, PddmParams, ScoreScaling};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    /// `(i, j)` with `i < j` and equal labels.
    pub positives: Vec<(usize, usize)>,
    /// `(i, j)` with `i < j` and differing labels.
    pub negatives: Vec<(usize, usize)>,
}

pub fn enumerate_pairs<L: PartialEq>(labels: &[L]) -> PairSets {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    PairSets {
        positives,
        negatives,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quadruplet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
}

impl Quadruplet {
    pub fn satisfies_labels<L: PartialEq>(&self, labels: &[L]) -> bool {
        let n = labels.len();
        [self.i, self.j, self.k, self.l].iter().all(|&x| x < n)
            && self.i != self.j
            && labels[self.i] == labels[self.j]
            && labels[self.k] != labels[self.i]
            && labels[self.l] != labels[self.j]
    }

    pub fn indices(&self) -> [usize; 4] {
        [self.i, self.j, self.k, self.l]
    }
}

/// Outcome of one mining pass.
#[derive(Debug, Clone)]
pub struct Selection {
    pub quad: Quadruplet,
    /// Raw similarities `S_îĵ`, `S_îk̂`, `S_ĵl̂`.
    pub raw: [f64; 3],
    /// The same scores rescaled by `scaling`.
    pub normalized: [f64; 3],
    /// Min-max range over every score evaluated during this pass.
    pub scaling: ScoreScaling,
    /// Every pair evaluated, in evaluation order (`(î, k)` rows keep `î` first).
    pub evaluated: Vec<(usize, usize)>,
    pub positive_pairs: usize,
}

impl Selection {
    /// Number of similarity evaluations performed.
    pub fn evaluations(&self) -> usize {
        self.evaluated.len()
    }
}

/// Upper bound on evaluations for a batch of `m` samples with `positives` positive pairs.
pub fn evaluation_bound(positives: usize, m: usize) -> usize {
    positives + 2 * m.saturating_sub(1)
}

/// Hard-quadruplet selection under an arbitrary symmetric similarity.
pub fn select_with<L, S>(labels: &[L], mut similarity: S) -> Result<Selection>
where
    L: PartialEq,
    S: FnMut(usize, usize) -> Result<f64>,
{
    let pairs = enumerate_pairs(labels);
    if pairs.positives.is_empty() {
        return Err(Error::NoPositivePair);
    }
    let mut evaluated = Vec::with_capacity(evaluation_bound(pairs.positives.len(), labels.len()));
    let mut scores = Vec::with_capacity(evaluated.capacity());
    let mut eval = |a: usize, b: usize, evaluated: &mut Vec<(usize, usize)>| -> Result<f64> {
        let s = similarity(a, b)?;
        if !s.is_finite() {
            return Err(Error::NonFinite("similarity"));
        }
        evaluated.push((a, b));
        scores.push(s);
        Ok(s)
    };

    let mut best_pos: Option<((usize, usize), f64)> = None;
    for &(i, j) in &pairs.positives {
        let s = eval(i, j, &mut evaluated)?;
        if best_pos.is_none_or(|(_, b)| s < b) {
            best_pos = Some(((i, j), s));
        }
    }
    let ((i_hat, j_hat), s_pos) = best_pos.expect("non-empty positives");

    let mut hardest_negative =
        |anchor: usize, evaluated: &mut Vec<(usize, usize)>| -> Result<(usize, f64)> {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..labels.len() {
                if labels[k] == labels[anchor] {
                    continue;
                }
                let s = eval(anchor, k, evaluated)?;
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
            best.ok_or(Error::NoNegativePartner(anchor))
        };
    let (k_hat, s_ik) = hardest_negative(i_hat, &mut evaluated)?;
    let (l_hat, s_jl) = hardest_negative(j_hat, &mut evaluated)?;

    let scaling = ScoreScaling::from_scores(&scores)?;
    if scaling.is_degenerate() {
        log::warn!("all {} mined scores are equal", scores.len());
    }
    let raw = [s_pos, s_ik, s_jl];
    Ok(Selection {
        quad: Quadruplet {
            i: i_hat,
            j: j_hat,
            k: k_hat,
            l: l_hat,
        },
        raw,
        normalized: raw.map(|s| scaling.apply(s)),
        scaling,
        evaluated,
        positive_pairs: pairs.positives.len(),
    })
}

fn check_lengths<F, L>(features: &[F], labels: &[L]) -> Result<()> {
    crate::error::check_len("mining", "features", features.len(), "labels", labels.len())
}

/// PDDM-guided selection in evaluation mode.
pub fn select_hard_quadruplet<F, L>(
    features: &[F],
    labels: &[L],
    p: &PddmParams,
) -> Result<Selection>
where
    F: AsRef<[f64]>,
    L: PartialEq,
{
    check_lengths(features, labels)?;
    select_with(labels, |a, b| {
        pddm::score(features[a].as_ref(), features[b].as_ref(), p)
    })
}

/// Baseline selection with similarity `−D` (Euclidean distance).
pub fn select_euclidean_quadruplet<F, L>(features: &[F], labels: &[L]) -> Result<Selection>
where
    F: AsRef<[f64]>,
    L: PartialEq,
{
    check_lengths(features, labels)?;
    select_with(labels, |a, b| {
        euclidean_distance(features[a].as_ref(), features[b].as_ref()).map(|d| -d)
    })
}

/// Applies the selection rule literally to a full similarity matrix.
pub fn brute_force_from_matrix<L: PartialEq>(labels: &[L], sim: &[Vec<f64>]) -> Result<Quadruplet> {
    let n = labels.len();
    let mut best_pos: Option<(usize, usize, f64)> = None;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] && best_pos.is_none_or(|(_, _, b)| sim[i][j] < b) {
                best_pos = Some((i, j, sim[i][j]));
            }
        }
    }
    let (i, j, _) = best_pos.ok_or(Error::NoPositivePair)?;
    let argmax_negative = |a: usize| -> Result<usize> {
        (0..n)
            .filter(|&k| labels[k] != labels[a])
            .fold(None, |best: Option<usize>, k| match best {
                Some(b) if sim[a][k] <= sim[a][b] => Some(b),
                _ => Some(k),
            })
            .ok_or(Error::NoNegativePartner(a))
    };
    Ok(Quadruplet {
        i,
        j,
        k: argmax_negative(i)?,
        l: argmax_negative(j)?,
    })
}

/// Exhaustive oracle: scores all `m²` ordered pairs, then selects.
pub fn brute_force_quadruplet<F, L>(
    features: &[F],
    labels: &[L],
    p: &PddmParams,
) -> Result<Quadruplet>
where
    F: AsRef<[f64]>,
    L: PartialEq,
{
    check_lengths(features, labels)?;
    let n = features.len();
    let mut sim = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                sim[a][b] = pddm::score(features[a].as_ref(), features[b].as_ref(), p)?;
            }
        }
    }
    brute_force_from_matrix(labels, &sim)
}

/// Whether each hard negative lies inside its anchor's class radius in the
/// batch, i.e. closer to the anchor than the anchor's farthest positive.
pub fn boundary_violations<F, L>(
    features: &[F],
    labels: &[L],
    quad: &Quadruplet,
) -> Result<[bool; 2]>
where
    F: AsRef<[f64]>,
    L: PartialEq,
{
    check_lengths(features, labels)?;
    let radius = |a: usize| -> Result<f64> {
        let mut r: f64 = 0.0;
        for p in 0..labels.len() {
            if p != a && labels[p] == labels[a] {
                r = r.max(euclidean_distance(
                    features[a].as_ref(),
                    features[p].as_ref(),
                )?);
            }
        }
        Ok(r)
    };
    let violates = |a: usize, n: usize| -> Result<bool> {
        Ok(euclidean_distance(features[a].as_ref(), features[n].as_ref())? < radius(a)?)
    };
    Ok([violates(quad.i, quad.k)?, violates(quad.j, quad.l)?])
}
