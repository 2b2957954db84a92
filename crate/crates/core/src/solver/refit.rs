//! Closed-form least-squares refits of the three diagonals.

use nalgebra::{DMatrix, DVector};

use crate::error::{shape, Result};
use crate::linalg::{dot, Matrix, Real};

/// Row-wise scale: `d_i = ⟨A_i, G_i⟩ / ‖G_i‖²`, or 0 when `G_i` vanishes.
pub fn refit_left_diagonal<T: Real>(a: &Matrix<T>, g: &Matrix<T>) -> Result<Vec<T>> {
    if a.shape() != g.shape() {
        return Err(shape(format!("target is {:?} but G is {:?}", a.shape(), g.shape())));
    }
    Ok((0..a.rows())
        .map(|i| {
            let den = dot(g.row(i), g.row(i));
            if den == T::zero() {
                T::zero()
            } else {
                dot(a.row(i), g.row(i)) / den
            }
        })
        .collect())
}

/// Column-wise mirror of [`refit_left_diagonal`].
pub fn refit_right_diagonal<T: Real>(a: &Matrix<T>, g: &Matrix<T>) -> Result<Vec<T>> {
    if a.shape() != g.shape() {
        return Err(shape(format!("target is {:?} but G is {:?}", a.shape(), g.shape())));
    }
    let n = a.cols();
    let mut num = vec![T::zero(); n];
    let mut den = vec![T::zero(); n];
    for i in 0..a.rows() {
        for (j, (&x, &y)) in a.row(i).iter().zip(g.row(i)).enumerate() {
            num[j] += x * y;
            den[j] += y * y;
        }
    }
    Ok(num
        .into_iter()
        .zip(den)
        .map(|(n, d)| if d == T::zero() { T::zero() } else { n / d })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiddleRefit<T> {
    pub d2: Vec<T>,
    /// Regularizer actually used.
    pub lambda: f64,
    /// The system was singular (or nearly so) and a minimum-norm solution was returned.
    pub min_norm_fallback: bool,
}

/// Default regularizer `1e-8 · max(1, mean(diag F))`.
pub fn default_lambda(diag_mean: f64) -> f64 {
    1e-8 * diag_mean.max(1.0)
}

/// Solves `(F + λI)·d2 = b` with `F = (GLᵀGL) ⊙ (GR·GRᵀ)` and
/// `b_r = GL[:, r]ᵀ · A · GR[r, :]ᵀ`.
///
/// `lambda = None` selects [`default_lambda`]. The solve is a Cholesky
/// factorization in 64-bit; a singular or badly conditioned system falls back
/// to the SVD minimum-norm solution.
pub fn refit_middle_diagonal<T: Real>(
    a: &Matrix<T>,
    gl: &Matrix<T>,
    gr: &Matrix<T>,
    lambda: Option<f64>,
) -> Result<MiddleRefit<T>> {
    let (m, n) = a.shape();
    let k = gl.cols();
    if gl.rows() != m || gr.rows() != k || gr.cols() != n {
        return Err(shape(format!(
            "A is {m}x{n}, GL is {}x{}, GR is {}x{}",
            gl.rows(),
            gl.cols(),
            gr.rows(),
            gr.cols()
        )));
    }
    let glt = gl.transpose();
    let left_gram = glt.matmul_t(&glt)?;
    let right_gram = gr.matmul_t(gr)?;
    let a_grt = a.matmul_t(gr)?;

    let mut f = DMatrix::<f64>::from_fn(k, k, |r, s| (left_gram[(r, s)] * right_gram[(r, s)]).to_f64());
    let b = DVector::<f64>::from_fn(k, |r, _| dot(glt.row(r), &a_grt.column(r)).to_f64());

    let diag_mean = f.diagonal().mean();
    let lambda = lambda.unwrap_or_else(|| default_lambda(diag_mean));
    for r in 0..k {
        f[(r, r)] += lambda;
    }

    let (solution, min_norm_fallback) = match well_conditioned_cholesky(&f) {
        Some(chol) => (chol.solve(&b), false),
        None => (min_norm_solve(f, &b), true),
    };
    Ok(MiddleRefit {
        d2: solution.iter().map(|&x| T::from_f64(x)).collect(),
        lambda,
        min_norm_fallback,
    })
}

fn well_conditioned_cholesky(f: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = f.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    // (lo/hi)² is a cheap lower bound on 1/cond(F)
    if hi == 0.0 || (lo / hi).powi(2) < 1e-13 {
        return None;
    }
    Some(chol)
}

fn min_norm_solve(f: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = f.nrows();
    let svd = f.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = f64::EPSILON * k as f64 * smax;
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(k))
}
