//! Dense f64 primitives with hand-derived backward passes.
//!
//! Vectors are plain `[f64]` slices. Matrices are row-major and output-major:
//! `rows` is the output dimension of the affine map they define.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Norms at or below this are rejected by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(
            "Matrix::from_vec",
            "rows*cols",
            rows * cols,
            "data",
            data.len(),
        )?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// # Panics
    /// If the rows are ragged. Intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `W x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec", "W.cols", self.cols, "x", x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `Wᵀ y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec_transposed", "W.rows", self.rows, "y", y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) -> Result<()> {
        check_len("add_outer", "M.rows", self.rows, "a", a.len())?;
        check_len("add_outer", "M.cols", self.cols, "b", b.len())?;
        for (r, &ar) in a.iter().enumerate() {
            let s = ar * scale;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, &bc) in row.iter_mut().zip(b) {
                *m += s * bc;
            }
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `W x + b`
pub fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_len("affine", "W.cols", w.cols, "x", x.len())?;
    check_len("affine", "b", b.len(), "W.rows", w.rows)?;
    let mut out = w.matvec(x)?;
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub dw: Matrix,
    pub db: Vec<f64>,
    pub dx: Vec<f64>,
}

pub fn affine_backward(x: &[f64], w: &Matrix, d_out: &[f64]) -> Result<AffineGrads> {
    check_len("affine_backward", "W.cols", w.cols, "x", x.len())?;
    check_len("affine_backward", "dOut", d_out.len(), "W.rows", w.rows)?;
    let mut dw = Matrix::zeros(w.rows, w.cols);
    dw.add_outer(d_out, x, 1.0)?;
    Ok(AffineGrads {
        dw,
        db: d_out.to_vec(),
        dx: w.matvec_transposed(d_out)?,
    })
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Passes `d_out` where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(x: &[f64], d_out: &[f64]) -> Result<Vec<f64>> {
    check_len("relu_backward", "x", x.len(), "dOut", d_out.len())?;
    Ok(x.iter()
        .zip(d_out)
        .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
        .collect())
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize"));
    }
    if n <= EPS_NORM {
        return Err(Error::DegenerateNorm {
            norm: n,
            threshold: EPS_NORM,
        });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Applies the Jacobian `(I − x̂x̂ᵀ)/‖x‖` of `x ↦ x/‖x‖` to `d_out`.
pub fn l2_normalize_backward(x: &[f64], d_out: &[f64]) -> Result<Vec<f64>> {
    check_len("l2_normalize_backward", "x", x.len(), "dOut", d_out.len())?;
    let x_hat = l2_normalize(x)?;
    let n = norm(x);
    let radial = dot(&x_hat, d_out);
    Ok(d_out
        .iter()
        .zip(&x_hat)
        .map(|(g, xh)| (g - radial * xh) / n)
        .collect())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("euclidean_distance", "a", a.len(), "b", b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn affine_examples() {
        let y = affine(&[1.0, 2.0], &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);

        let w = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(
            affine(&[1.0, 2.0], &w, &[1.0, 0.0]).unwrap(),
            vec![4.0, 2.0]
        );

        let w = Matrix::from_rows(&[&[0.3, -2.0], &[7.0, 1.5]]);
        assert_eq!(
            affine(&[0.0, 0.0], &w, &[3.0, -1.0]).unwrap(),
            vec![3.0, -1.0]
        );
    }

    #[test]
    fn affine_dimension_errors_name_operands() {
        let err = affine(&[1.0, 2.0, 3.0], &Matrix::identity(2), &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("W.cols") && msg.contains('x'), "{msg}");
        assert!(matches!(
            affine(&[1.0, 2.0], &Matrix::identity(2), &[0.0]),
            Err(Error::DimensionMismatch { lhs: "b", .. })
        ));
    }

    #[test]
    fn affine_backward_examples() {
        let g = affine_backward(&[1.0, 0.0], &Matrix::identity(2), &[1.0, 1.0]).unwrap();
        assert_eq!(g.dx, vec![1.0, 1.0]);

        let w = Matrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let g = affine_backward(&[2.0, 3.0], &w, &[1.0, 0.0]).unwrap();
        assert_eq!(g.dw, Matrix::from_rows(&[&[2.0, 3.0], &[0.0, 0.0]]));
        assert_eq!(g.db, vec![1.0, 0.0]);

        let g = affine_backward(&[2.0, 3.0], &w, &[0.0, 0.0]).unwrap();
        assert!(g
            .dw
            .as_slice()
            .iter()
            .chain(&g.db)
            .chain(&g.dx)
            .all(|v| *v == 0.0));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(
            relu_backward(&[-1.0, 2.0], &[5.0, 5.0]).unwrap(),
            vec![0.0, 5.0]
        );
        assert_eq!(
            relu_backward(&[0.0, 3.0], &[1.0, 1.0]).unwrap(),
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn normalize_examples() {
        assert!(close(
            &l2_normalize(&[3.0, 4.0]).unwrap(),
            &[0.6, 0.8],
            1e-15
        ));
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            l2_normalize_backward(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            l2_normalize_backward(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn normalize_rejects_degenerate_input() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
        assert!(matches!(
            l2_normalize(&[1e-13, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
        assert!(l2_normalize(&[1e-11, 0.0]).is_ok());
    }

    #[test]
    fn distance_examples() {
        let a = [0.3, -0.2, 0.9];
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        let d = euclidean_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);

        let g = finite_difference_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);

        let g = finite_difference_gradient(norm, &[3.0, 4.0], 1e-5).unwrap();
        assert!(close(&g, &[0.6, 0.8], 1e-6));
    }

    #[test]
    fn finite_difference_rejects_non_finite() {
        let r = finite_difference_gradient(|t| t[0].ln(), &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(finite_difference_gradient(|t| t[0], &[0.0], 0.0).is_err());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #[test]
        fn normalized_output_is_unit(x in vec_strategy(6)) {
            prop_assume!(norm(&x) > 1e-6);
            let y = l2_normalize(&x).unwrap();
            prop_assert!((norm(&y) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn normalize_backward_kills_radial_component(x in vec_strategy(5), g in vec_strategy(5)) {
            prop_assume!(norm(&x) > 1e-3);
            let dx = l2_normalize_backward(&x, &g).unwrap();
            let x_hat = l2_normalize(&x).unwrap();
            prop_assert!(dot(&dx, &x_hat).abs() < 1e-10);
        }

        #[test]
        fn unit_distance_identity(a in vec_strategy(4), b in vec_strategy(4)) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let a = l2_normalize(&a).unwrap();
            let b = l2_normalize(&b).unwrap();
            let d = euclidean_distance(&a, &b).unwrap();
            prop_assert!((d * d - (2.0 - 2.0 * dot(&a, &b))).abs() < 1e-12);
        }

        #[test]
        fn triangle_inequality(a in vec_strategy(3), b in vec_strategy(3), c in vec_strategy(3)) {
            let ab = euclidean_distance(&a, &b).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab, euclidean_distance(&b, &a).unwrap());
        }

        #[test]
        fn affine_backward_matches_finite_differences(
            x in vec_strategy(3),
            w in vec_strategy(6),
            b in vec_strategy(2),
            g in vec_strategy(2),
        ) {
            let wm = Matrix::from_vec(2, 3, w.clone()).unwrap();
            let grads = affine_backward(&x, &wm, &g).unwrap();
            // Scalar probe L = gᵀ(Wx + b).
            let loss_x = |xs: &[f64]| dot(&g, &affine(xs, &wm, &b).unwrap());
            let fd_x = finite_difference_gradient(loss_x, &x, 1e-5).unwrap();
            prop_assert!(relative_error(&grads.dx, &fd_x) < 1e-5);
            let loss_w = |ws: &[f64]| {
                let m = Matrix::from_vec(2, 3, ws.to_vec()).unwrap();
                dot(&g, &affine(&x, &m, &b).unwrap())
            };
            let fd_w = finite_difference_gradient(loss_w, &w, 1e-5).unwrap();
            prop_assert!(relative_error(grads.dw.as_slice(), &fd_w) < 1e-5);
            let loss_b = |bs: &[f64]| dot(&g, &affine(&x, &wm, bs).unwrap());
            let fd_b = finite_difference_gradient(loss_b, &b, 1e-5).unwrap();
            prop_assert!(relative_error(&grads.db, &fd_b) < 1e-5);
        }

        #[test]
        fn relu_and_normalize_backward_match_finite_differences(
            x in vec_strategy(5),
            g in vec_strategy(5),
        ) {
            prop_assume!(x.iter().all(|v| v.abs() > 1e-3));
            let probe = |xs: &[f64]| dot(&g, &relu(xs));
            let fd = finite_difference_gradient(probe, &x, 1e-6).unwrap();
            prop_assert!(relative_error(&relu_backward(&x, &g).unwrap(), &fd) < 1e-5);

            prop_assume!(norm(&x) > 0.1);
            let probe = |xs: &[f64]| dot(&g, &l2_normalize(xs).unwrap());
            let fd = finite_difference_gradient(probe, &x, 1e-5).unwrap();
            let an = l2_normalize_backward(&x, &g).unwrap();
            prop_assert!(relative_error(&an, &fd) < 1e-5);
        }
    }
}
