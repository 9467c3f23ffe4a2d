//! The position-dependent similarity unit.
//!
//! For a pair of unit embeddings `(f_i, f_j)`:
//!
//! ```text
//! u  = |f_i − f_j|                 v  = (f_i + f_j) / 2
//! u' = r(σ(W_u u + b_u))           v' = r(σ(W_v v + b_v))
//! c  = σ(W_c [u'; v'] + b_c)       S  = W_s c + b_s
//! ```
//!
//! with `σ` the ReLU and `r` the l2 normalization. The mean vector `v` lets
//! the score depend on where in the embedding space the pair sits.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{
    affine, affine_backward, dot, l2_normalize, l2_normalize_backward, norm, relu, relu_backward,
    Matrix,
};
use crate::params::{Parameters, TensorKind, TensorView};

/// Inputs further than this from unit norm are rejected.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Initial value of the three hidden biases. A positive offset keeps the
/// difference branch alive when `f_i = f_j` (where `u = 0`) and makes an
/// all-negative pre-activation unlikely for distant pairs.
const HIDDEN_BIAS_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PddmParams {
    pub w_u: Matrix,
    pub b_u: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    /// `d × 2d`, acting on the stacked `[u'; v']`.
    pub w_c: Matrix,
    pub b_c: Vec<f64>,
    /// `1 × d`
    pub w_s: Matrix,
    pub b_s: f64,
}

impl PddmParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_u: Matrix::zeros(d, d),
            b_u: vec![0.0; d],
            w_v: Matrix::zeros(d, d),
            b_v: vec![0.0; d],
            w_c: Matrix::zeros(d, 2 * d),
            b_c: vec![0.0; d],
            w_s: Matrix::zeros(1, d),
            b_s: 0.0,
        }
    }

    /// Fan-in scaled Gaussian weights (`2/fan_in` for the ReLU layers,
    /// `1/fan_in` for the score layer).
    pub fn init(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDims(vec![d]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize, gain: f64| {
            let normal = Normal::new(0.0, (gain / cols as f64).sqrt()).expect("valid std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        Ok(Self {
            w_u: gaussian(d, d, 2.0),
            b_u: vec![HIDDEN_BIAS_INIT; d],
            w_v: gaussian(d, d, 2.0),
            b_v: vec![HIDDEN_BIAS_INIT; d],
            w_c: gaussian(d, 2 * d, 2.0),
            b_c: vec![HIDDEN_BIAS_INIT; d],
            w_s: gaussian(1, d, 1.0),
            b_s: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.b_u.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim())
    }

    /// Checks that every tensor agrees with the embedding dimension.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let shapes = [
            ("W_u", (self.w_u.rows(), self.w_u.cols()), (d, d)),
            ("W_v", (self.w_v.rows(), self.w_v.cols()), (d, d)),
            ("W_c", (self.w_c.rows(), self.w_c.cols()), (d, 2 * d)),
            ("W_s", (self.w_s.rows(), self.w_s.cols()), (1, d)),
            ("b_v", (self.b_v.len(), 1), (d, 1)),
            ("b_c", (self.b_c.len(), 1), (d, 1)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Config(format!(
                    "PDDM tensor {name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }
}

impl Parameters for PddmParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            matrix_view("pddm.w_u", &self.w_u),
            bias_view("pddm.b_u", &self.b_u),
            matrix_view("pddm.w_v", &self.w_v),
            bias_view("pddm.b_v", &self.b_v),
            matrix_view("pddm.w_c", &self.w_c),
            bias_view("pddm.b_c", &self.b_c),
            matrix_view("pddm.w_s", &self.w_s),
            bias_view("pddm.b_s", std::slice::from_ref(&self.b_s)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_u.as_mut_slice(),
            &mut self.b_u,
            self.w_v.as_mut_slice(),
            &mut self.b_v,
            self.w_c.as_mut_slice(),
            &mut self.b_c,
            self.w_s.as_mut_slice(),
            std::slice::from_mut(&mut self.b_s),
        ]
    }
}

fn matrix_view<'a>(name: &str, m: &'a Matrix) -> TensorView<'a> {
    TensorView {
        name: name.to_string(),
        kind: TensorKind::Weight,
        shape: (m.rows(), m.cols()),
        data: m.as_slice(),
    }
}

fn bias_view<'a>(name: &str, b: &'a [f64]) -> TensorView<'a> {
    TensorView {
        name: name.to_string(),
        kind: TensorKind::Bias,
        shape: (b.len(), 1),
        data: b,
    }
}

/// Inverted-dropout multipliers for `u'`, `v'` and `c`: each entry is either
/// 0 or `1/(1−p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub c: Vec<f64>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(d: usize, p: f64, rng: &mut R) -> Self {
        let keep = 1.0 - p;
        let mut draw = || -> Vec<f64> {
            (0..d)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let u = draw();
        let v = draw();
        let c = draw();
        Self { u, v, c }
    }
}

#[derive(Debug, Clone)]
pub struct PddmCache {
    /// `sign(f_i − f_j)`, with 0 at ties.
    diff_sign: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    z_u: Vec<f64>,
    h_u: Vec<f64>,
    z_v: Vec<f64>,
    h_v: Vec<f64>,
    /// `[u'; v']` after dropout.
    stacked: Vec<f64>,
    z_c: Vec<f64>,
    pub c: Vec<f64>,
    mask: Option<DropoutMask>,
    pub score: f64,
}

impl PddmCache {
    pub fn u_prime(&self) -> &[f64] {
        &self.stacked[..self.u.len()]
    }

    pub fn v_prime(&self) -> &[f64] {
        &self.stacked[self.u.len()..]
    }
}

fn check_unit(op: &'static str, f: &[f64]) -> Result<()> {
    let n = norm(f);
    if !n.is_finite() {
        return Err(Error::NonFinite(op));
    }
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotUnitNorm { op, norm: n });
    }
    Ok(())
}

fn apply_mask(x: &mut [f64], mask: Option<&[f64]>) {
    if let Some(m) = mask {
        for (a, k) in x.iter_mut().zip(m) {
            *a *= k;
        }
    }
}

fn branch(
    w: &Matrix,
    b: &[f64],
    input: &[f64],
    name: &'static str,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let z = affine(input, w, b)?;
    let h = relu(&z);
    let out = l2_normalize(&h).map_err(|e| match e {
        Error::DegenerateNorm { .. } => Error::DegenerateBranch { branch: name },
        other => other,
    })?;
    Ok((z, h, out))
}

/// Raw similarity score of a pair. The mask, when given, is applied to `u'`,
/// `v'` and `c`; evaluation passes `None`.
pub fn forward(
    f_i: &[f64],
    f_j: &[f64],
    p: &PddmParams,
    mask: Option<&DropoutMask>,
) -> Result<(f64, PddmCache)> {
    let d = p.dim();
    check_len("pddm_forward", "f_i", f_i.len(), "d", d)?;
    check_len("pddm_forward", "f_j", f_j.len(), "d", d)?;
    check_unit("pddm_forward", f_i)?;
    check_unit("pddm_forward", f_j)?;
    if let Some(m) = mask {
        check_len(
            "pddm_forward",
            "dropout mask",
            m.u.len().min(m.v.len()).min(m.c.len()),
            "d",
            d,
        )?;
    }

    let diff_sign: Vec<f64> = f_i
        .iter()
        .zip(f_j)
        .map(|(a, b)| {
            let s = a - b;
            if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let u: Vec<f64> = f_i.iter().zip(f_j).map(|(a, b)| (a - b).abs()).collect();
    let v: Vec<f64> = f_i.iter().zip(f_j).map(|(a, b)| (a + b) / 2.0).collect();

    let (z_u, h_u, mut u_prime) = branch(&p.w_u, &p.b_u, &u, "difference (u)")?;
    let (z_v, h_v, mut v_prime) = branch(&p.w_v, &p.b_v, &v, "mean (v)")?;
    apply_mask(&mut u_prime, mask.map(|m| m.u.as_slice()));
    apply_mask(&mut v_prime, mask.map(|m| m.v.as_slice()));

    let mut stacked = u_prime;
    stacked.extend_from_slice(&v_prime);
    let z_c = affine(&stacked, &p.w_c, &p.b_c)?;
    let mut c = relu(&z_c);
    apply_mask(&mut c, mask.map(|m| m.c.as_slice()));
    let score = dot(p.w_s.row(0), &c) + p.b_s;
    if !score.is_finite() {
        return Err(Error::NonFinite("pddm_forward"));
    }
    Ok((
        score,
        PddmCache {
            diff_sign,
            u,
            v,
            z_u,
            h_u,
            z_v,
            h_v,
            stacked,
            z_c,
            c,
            mask: mask.cloned(),
            score,
        },
    ))
}

/// Scalar convenience wrapper around [`forward`] in evaluation mode.
pub fn score(f_i: &[f64], f_j: &[f64], p: &PddmParams) -> Result<f64> {
    forward(f_i, f_j, p, None).map(|(s, _)| s)
}

#[derive(Debug, Clone)]
pub struct PddmGrads {
    pub params: PddmParams,
    pub d_f_i: Vec<f64>,
    pub d_f_j: Vec<f64>,
}

pub fn backward(cache: &PddmCache, p: &PddmParams, d_s: f64) -> Result<PddmGrads> {
    let mut params = p.zeros_like();
    let (d_f_i, d_f_j) = backward_into(cache, p, d_s, &mut params)?;
    Ok(PddmGrads {
        params,
        d_f_i,
        d_f_j,
    })
}

/// Accumulates parameter gradients of `d_s · S` into `grads` and returns the
/// gradients with respect to `f_i` and `f_j`.
pub fn backward_into(
    cache: &PddmCache,
    p: &PddmParams,
    d_s: f64,
    grads: &mut PddmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = p.dim();
    check_len("pddm_backward", "cache", cache.u.len(), "d", d)?;
    check_len("pddm_backward", "grads", grads.dim(), "d", d)?;

    // S = W_s c + b_s
    grads.b_s += d_s;
    {
        let gw = grads.w_s.as_mut_slice();
        for (g, c) in gw.iter_mut().zip(&cache.c) {
            *g += d_s * c;
        }
    }
    let mut d_c: Vec<f64> = p.w_s.row(0).iter().map(|w| w * d_s).collect();
    apply_mask(&mut d_c, cache.mask.as_ref().map(|m| m.c.as_slice()));
    let d_zc = relu_backward(&cache.z_c, &d_c)?;
    let g = affine_backward(&cache.stacked, &p.w_c, &d_zc)?;
    accumulate(grads.w_c.as_mut_slice(), g.dw.as_slice());
    accumulate(&mut grads.b_c, &g.db);

    let (mut d_u_prime, mut d_v_prime) = (g.dx[..d].to_vec(), g.dx[d..].to_vec());
    apply_mask(&mut d_u_prime, cache.mask.as_ref().map(|m| m.u.as_slice()));
    apply_mask(&mut d_v_prime, cache.mask.as_ref().map(|m| m.v.as_slice()));

    let d_hu = l2_normalize_backward(&cache.h_u, &d_u_prime)?;
    let d_zu = relu_backward(&cache.z_u, &d_hu)?;
    let gu = affine_backward(&cache.u, &p.w_u, &d_zu)?;
    accumulate(grads.w_u.as_mut_slice(), gu.dw.as_slice());
    accumulate(&mut grads.b_u, &gu.db);

    let d_hv = l2_normalize_backward(&cache.h_v, &d_v_prime)?;
    let d_zv = relu_backward(&cache.z_v, &d_hv)?;
    let gv = affine_backward(&cache.v, &p.w_v, &d_zv)?;
    accumulate(grads.w_v.as_mut_slice(), gv.dw.as_slice());
    accumulate(&mut grads.b_v, &gv.db);

    let mut d_f_i = Vec::with_capacity(d);
    let mut d_f_j = Vec::with_capacity(d);
    for k in 0..d {
        let via_u = cache.diff_sign[k] * gu.dx[k];
        let via_v = gv.dx[k] / 2.0;
        d_f_i.push(via_u + via_v);
        d_f_j.push(-via_u + via_v);
    }
    Ok((d_f_i, d_f_j))
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Evaluation-mode scores for a list of index pairs into `features`.
pub fn score_pairs<F: AsRef<[f64]>>(
    features: &[F],
    pairs: &[(usize, usize)],
    p: &PddmParams,
) -> Result<Vec<f64>> {
    let n = features.len();
    pairs
        .iter()
        .map(|&(i, j)| {
            for index in [i, j] {
                if index >= n {
                    return Err(Error::IndexOutOfRange { index, len: n });
                }
            }
            score(features[i].as_ref(), features[j].as_ref(), p)
        })
        .collect()
}

/// Min-max range of a batch of raw scores. Treated as a constant during
/// backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreScaling {
    pub min: f64,
    pub max: f64,
}

impl ScoreScaling {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("score batch"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("normalize_scores"));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    pub fn is_degenerate(&self) -> bool {
        self.max.is_nan() || self.min.is_nan() || self.max <= self.min
    }

    /// Maps a raw score into `[0, 1]`; every score maps to 0.5 when the batch is degenerate.
    pub fn apply(&self, s: f64) -> f64 {
        if self.is_degenerate() {
            0.5
        } else {
            (s - self.min) / (self.max - self.min)
        }
    }

    /// `d apply / d s` with the range held fixed.
    pub fn slope(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            1.0 / (self.max - self.min)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScores {
    pub values: Vec<f64>,
    pub scaling: ScoreScaling,
    /// Set when all scores were equal and were mapped to 0.5.
    pub degenerate: bool,
}

pub fn normalize_scores(scores: &[f64]) -> Result<NormalizedScores> {
    let scaling = ScoreScaling::from_scores(scores)?;
    let degenerate = scaling.is_degenerate();
    if degenerate {
        log::warn!(
            "degenerate score batch: all {} scores equal {}",
            scores.len(),
            scaling.min
        );
    }
    Ok(NormalizedScores {
        values: scores.iter().map(|&s| scaling.apply(s)).collect(),
        scaling,
        degenerate,
    })
}
