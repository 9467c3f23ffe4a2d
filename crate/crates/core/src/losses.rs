//! Double-header hinge losses and the joint regularized objective.
//!
//! Slack variables are not materialized: each slack equals its hinge at the
//! optimum, so the losses are written directly as hinge sums.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::euclidean_distance;
use crate::params::{Parameters, TensorKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricLoss {
    pub value: f64,
    /// `[ε, τ]`: `max(0, α + S_îk̂ − S_îĵ)` and `max(0, α + S_ĵl̂ − S_îĵ)`.
    pub hinges: [f64; 2],
    pub d_pos: f64,
    pub d_neg1: f64,
    pub d_neg2: f64,
}

/// Hinges on (normalized) similarity scores with margin `alpha`.
pub fn metric_loss(s_pos: f64, s_neg1: f64, s_neg2: f64, alpha: f64) -> Result<MetricLoss> {
    if ![s_pos, s_neg1, s_neg2, alpha].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("metric_loss"));
    }
    let h1 = alpha + s_neg1 - s_pos;
    let h2 = alpha + s_neg2 - s_pos;
    let (a1, a2) = (h1 > 0.0, h2 > 0.0);
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(MetricLoss {
        value: h1.max(0.0) + h2.max(0.0),
        hinges: [h1.max(0.0), h2.max(0.0)],
        d_pos: -ind(a1) - ind(a2),
        d_neg1: ind(a1),
        d_neg2: ind(a2),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLoss {
    pub value: f64,
    /// `[o, ρ]`: `max(0, β + D_îĵ − D_îk̂)` and `max(0, β + D_îĵ − D_ĵl̂)`.
    pub hinges: [f64; 2],
    /// `[D_îĵ, D_îk̂, D_ĵl̂]`
    pub distances: [f64; 3],
    /// Gradients for `f_î`, `f_ĵ`, `f_k̂`, `f_l̂` in that order.
    pub grads: [Vec<f64>; 4],
}

/// `∂D/∂a` for `D = ‖a − b‖`, defined as zero when `a = b`.
fn distance_grad(a: &[f64], b: &[f64], d: f64) -> Vec<f64> {
    if d == 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += scale * b;
    }
}

/// Hinges on Euclidean distances between the quadruplet's embeddings.
pub fn embedding_loss(
    f_i: &[f64],
    f_j: &[f64],
    f_k: &[f64],
    f_l: &[f64],
    beta: f64,
) -> Result<EmbeddingLoss> {
    let d = f_i.len();
    for (name, f) in [("f_j", f_j), ("f_k", f_k), ("f_l", f_l)] {
        check_len("embedding_loss", "f_i", d, name, f.len())?;
    }
    if !beta.is_finite()
        || [f_i, f_j, f_k, f_l]
            .iter()
            .any(|f| f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("embedding_loss"));
    }
    let d_ij = euclidean_distance(f_i, f_j)?;
    let d_ik = euclidean_distance(f_i, f_k)?;
    let d_jl = euclidean_distance(f_j, f_l)?;
    let h1 = beta + d_ij - d_ik;
    let h2 = beta + d_ij - d_jl;

    let mut grads = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let g_ij = distance_grad(f_i, f_j, d_ij);
    if h1 > 0.0 {
        let g_ik = distance_grad(f_i, f_k, d_ik);
        add_scaled(&mut grads[0], &g_ij, 1.0);
        add_scaled(&mut grads[1], &g_ij, -1.0);
        add_scaled(&mut grads[0], &g_ik, -1.0);
        add_scaled(&mut grads[2], &g_ik, 1.0);
    }
    if h2 > 0.0 {
        let g_jl = distance_grad(f_j, f_l, d_jl);
        add_scaled(&mut grads[0], &g_ij, 1.0);
        add_scaled(&mut grads[1], &g_ij, -1.0);
        add_scaled(&mut grads[1], &g_jl, -1.0);
        add_scaled(&mut grads[3], &g_jl, 1.0);
    }
    Ok(EmbeddingLoss {
        value: h1.max(0.0) + h2.max(0.0),
        hinges: [h1.max(0.0), h2.max(0.0)],
        distances: [d_ij, d_ik, d_jl],
        grads,
    })
}

/// Squared Frobenius norm of every weight matrix (biases excluded), with
/// gradient `2W` (zero for biases).
pub fn regularizer<P: Parameters + Clone>(p: &P) -> (f64, P) {
    let kinds: Vec<TensorKind> = p.tensors().iter().map(|t| t.kind).collect();
    let mut grads = p.clone();
    let mut reg = 0.0;
    for (t, kind) in grads.tensors_mut().into_iter().zip(kinds) {
        match kind {
            TensorKind::Weight => {
                for w in t.iter_mut() {
                    reg += *w * *w;
                    *w *= 2.0;
                }
            }
            TensorKind::Bias => t.fill(0.0),
        }
    }
    (reg, grads)
}

/// One step's loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub e_m: f64,
    pub e_e: f64,
    pub reg: f64,
    pub total: f64,
    /// `[ε, τ, o, ρ]`
    pub hinges: [f64; 4],
}

/// `E_m + λ E_e + γ reg`
pub fn joint_loss(e_m: f64, e_e: f64, reg: f64, lambda: f64, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        e_m,
        e_e,
        reg,
        total: e_m + lambda * e_e + gamma * reg,
        hinges: [0.0; 4],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot, finite_difference_gradient, l2_normalize, relative_error, Matrix};
    use crate::pddm::PddmParams;

    #[test]
    fn metric_loss_satisfied_margins() {
        let l = metric_loss(0.9, 0.2, 0.3, 0.5).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!((l.d_pos, l.d_neg1, l.d_neg2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn metric_loss_active_hinges() {
        let l = metric_loss(0.5, 0.4, 0.6, 0.5).unwrap();
        assert!((l.hinges[0] - 0.4).abs() < 1e-15);
        assert!((l.hinges[1] - 0.6).abs() < 1e-15);
        assert!((l.value - 1.0).abs() < 1e-15);
        assert_eq!((l.d_pos, l.d_neg1, l.d_neg2), (-2.0, 1.0, 1.0));
    }

    #[test]
    fn metric_loss_rejects_nan() {
        assert!(metric_loss(f64::NAN, 0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn metric_loss_matches_finite_differences() {
        for s in [
            [0.5, 0.4, 0.6],
            [0.7, 0.1, 0.45],
            [0.2, 0.9, -0.4],
            [0.95, 0.2, 0.1],
        ] {
            let l = metric_loss(s[0], s[1], s[2], 0.5).unwrap();
            let fd = finite_difference_gradient(
                |t| metric_loss(t[0], t[1], t[2], 0.5).unwrap().value,
                &s,
                1e-6,
            )
            .unwrap();
            let an = [l.d_pos, l.d_neg1, l.d_neg2];
            assert!(relative_error(&an, &fd) < 1e-6, "{s:?}: {an:?} vs {fd:?}");
        }
    }

    #[test]
    fn embedding_loss_orthogonal_extreme() {
        let f = [1.0, 0.0, 0.0];
        let l = embedding_loss(&f, &f, &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(l.distances[0], 0.0);
        assert!((l.distances[1] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.value, 0.0);
        assert!(l.grads.iter().flatten().all(|g| *g == 0.0));
    }

    fn on_circle(deg: f64) -> Vec<f64> {
        vec![deg.to_radians().cos(), deg.to_radians().sin()]
    }

    #[test]
    fn embedding_loss_circle_chords() {
        let (fi, fj, fk, fl) = (
            on_circle(0.0),
            on_circle(10.0),
            on_circle(20.0),
            on_circle(30.0),
        );
        let chord = |deg: f64| 2.0 * (deg.to_radians() / 2.0).sin();
        // D_îĵ = chord(10°), D_îk̂ = chord(20°), D_ĵl̂ = chord(20°).
        let expected_hinge = 1.0 + chord(10.0) - chord(20.0);
        let l = embedding_loss(&fi, &fj, &fk, &fl, 1.0).unwrap();
        assert!((l.hinges[0] - expected_hinge).abs() < 1e-12);
        assert!((l.hinges[1] - expected_hinge).abs() < 1e-12);
        assert!((l.value - 2.0 * expected_hinge).abs() < 1e-12);
    }

    #[test]
    fn squared_distance_identity() {
        let beta = 1.0;
        for (a, b, c) in [(0.0, 10.0, 20.0), (5.0, 95.0, 170.0), (33.0, 200.0, 300.0)] {
            let (fi, fj, fk) = (on_circle(a), on_circle(b), on_circle(c));
            let dij = euclidean_distance(&fi, &fj).unwrap();
            let dik = euclidean_distance(&fi, &fk).unwrap();
            let lhs = beta + dij * dij - dik * dik;
            let rhs = beta - 2.0 * dot(&fi, &fj) + 2.0 * dot(&fi, &fk);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_loss_matches_finite_differences() {
        let raw = [
            vec![0.9, 0.1, -0.2],
            vec![0.3, 0.8, 0.1],
            vec![0.7, 0.2, 0.3],
            vec![0.4, 0.6, -0.5],
        ];
        let fs: Vec<Vec<f64>> = raw.iter().map(|r| l2_normalize(r).unwrap()).collect();
        let l = embedding_loss(&fs[0], &fs[1], &fs[2], &fs[3], 1.0).unwrap();
        assert!(l.hinges.iter().all(|h| *h > 1e-3));
        let flat: Vec<f64> = fs.concat();
        let fd = finite_difference_gradient(
            |t| {
                embedding_loss(&t[0..3], &t[3..6], &t[6..9], &t[9..12], 1.0)
                    .unwrap()
                    .value
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&l.grads.concat(), &fd) < 1e-6);
    }

    #[test]
    fn coincident_positive_pair_has_zero_distance_gradient() {
        let f = on_circle(0.0);
        let l = embedding_loss(&f, &f, &on_circle(20.0), &on_circle(40.0), 1.0).unwrap();
        assert!(l.value > 0.0);
        // Only the negative terms push.
        assert!(l.grads[0].iter().any(|g| *g != 0.0));
        assert!(l.grads[1].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn regularizer_examples() {
        let zero = PddmParams::zeros(3);
        assert_eq!(regularizer(&zero).0, 0.0);

        let mut p = PddmParams::zeros(2);
        p.w_u = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 0.0]]);
        p.b_u = vec![5.0, 5.0];
        p.b_s = 3.0;
        let (reg, g) = regularizer(&p);
        assert_eq!(reg, 9.0);
        assert_eq!(g.w_u, Matrix::from_rows(&[&[2.0, 4.0], &[4.0, 0.0]]));
        assert_eq!(g.b_u, vec![0.0, 0.0]);
        assert_eq!(g.b_s, 0.0);
    }

    #[test]
    fn regularizer_matches_finite_differences() {
        let p = PddmParams::init(3, 4).unwrap();
        let (_, g) = regularizer(&p);
        let mut scratch = p.clone();
        let fd = finite_difference_gradient(
            |t| {
                scratch.assign_flat(t);
                regularizer(&scratch).0
            },
            &p.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g.flatten(), &fd) < 1e-8);
    }

    #[test]
    fn joint_loss_examples() {
        let b = joint_loss(1.0, 0.4, 10.0, 0.5, 5e-4);
        assert!((b.total - 1.205).abs() < 1e-12);
        let b = joint_loss(1.0, 0.4, 10.0, 0.0, 5e-4);
        assert!((b.total - (1.0 + 5e-4 * 10.0)).abs() < 1e-15);
        let base = joint_loss(1.0, 1.0, 1.0, 0.5, 0.1).total;
        assert!(joint_loss(1.1, 1.0, 1.0, 0.5, 0.1).total >= base);
        assert!(joint_loss(1.0, 1.1, 1.0, 0.5, 0.1).total >= base);
        assert!(joint_loss(1.0, 1.0, 1.1, 0.5, 0.1).total >= base);
    }
}
