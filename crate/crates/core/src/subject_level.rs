//! Second-stage regression of estimated subject effects on subject-level
//! covariates.
//!
//! With fixed subject effects the subject-level coefficients `α` drop out of
//! the GEE. They are recovered by regressing `ν̂_i` on `(1, Z_i)`, either by
//! ordinary least squares or by iteratively reweighted least squares with
//! weight `(σ²_b I + Σ_ν̂|ν)^{-1}`, where `Σ_ν̂|ν` is the covariance of `ν̂`
//! given the true subject effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Panel;
use crate::error::{Error, Result};
use crate::linalg::{least_squares, matrix_rows, spd_inverse, symmetrize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaMethod {
    Ls,
    Irls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha_hat: Vec<f64>,
    pub intercept: f64,
    /// Covariance of `alpha_hat` (intercept excluded).
    #[serde(with = "matrix_rows")]
    pub cov_alpha: DMatrix<f64>,
    /// Residual variance for LS, the Step-1 moment estimate for IRLS.
    pub sigma2_b_hat: f64,
    pub method: AlphaMethod,
    pub iterations: usize,
}

impl AlphaFit {
    pub fn se(&self, k: usize) -> f64 {
        self.cov_alpha[(k, k)].max(0.0).sqrt()
    }
}

pub const IRLS_MAX_ITER: usize = 10;
pub const IRLS_TOL: f64 = 1e-8;

/// Subject covariates of the listed panel subjects as an `n × p_z` matrix.
pub fn subject_covariates(panel: &Panel, subjects: &[usize]) -> DMatrix<f64> {
    let p = panel.p_z();
    DMatrix::from_fn(subjects.len(), p, |r, c| panel.subjects()[subjects[r]].covariates[c])
}

fn design(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    DMatrix::from_fn(n, z.ncols() + 1, |r, c| if c == 0 { 1.0 } else { z[(r, c - 1)] })
}

fn check_dims(nu_hat: &[f64], z: &DMatrix<f64>) -> Result<()> {
    if nu_hat.len() != z.nrows() {
        return Err(Error::invalid("nu_hat and Z differ in the number of subjects"));
    }
    if nu_hat.len() < z.ncols() + 1 {
        return Err(Error::precondition(format!(
            "{} subjects cannot identify {} subject-level coefficients and an intercept",
            nu_hat.len(),
            z.ncols()
        )));
    }
    if nu_hat.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite subject effect or covariate"));
    }
    Ok(())
}

fn alpha_block(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows() - 1;
    m.view((1, 1), (p, p)).into_owned()
}

/// Least-squares fit of `ν̂` on `(1, Z)`.
///
/// A saturated fit (as many subjects as coefficients) has no residual
/// degrees of freedom; its residual variance and `cov_alpha` are reported
/// as zero.
pub fn alpha_ls(nu_hat: &[f64], z: &DMatrix<f64>) -> Result<AlphaFit> {
    check_dims(nu_hat, z)?;
    let x = design(z);
    let y = DVector::from_column_slice(nu_hat);
    let (coef, xtx_inv) = least_squares(&x, &y).ok_or_else(|| Error::Numerical("Z is rank deficient".into()))?;
    let df = x.nrows() - x.ncols();
    let s2 = if df == 0 {
        log::warn!("saturated subject-level regression; residual variance set to 0");
        0.0
    } else {
        (&y - &x * &coef).norm_squared() / df as f64
    };
    Ok(AlphaFit {
        alpha_hat: coef.iter().skip(1).copied().collect(),
        intercept: coef[0],
        cov_alpha: alpha_block(&xtx_inv) * s2,
        sigma2_b_hat: s2,
        method: AlphaMethod::Ls,
        iterations: 1,
    })
}

/// Iteratively reweighted least squares starting from the LS fit.
///
/// Each iteration sets `σ̂²_b` to the residual variance of the current fit
/// minus the mean diagonal of `Σ_ν̂|ν` (clamped at 0), then solves the
/// weighted normal equations. The residual variance uses the LS
/// degrees-of-freedom divisor so that `Σ_ν̂|ν = 0` reproduces LS.
pub fn alpha_irls(
    nu_hat: &[f64],
    z: &DMatrix<f64>,
    cov_nu_given_nu: &DMatrix<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<AlphaFit> {
    check_dims(nu_hat, z)?;
    let n = nu_hat.len();
    if cov_nu_given_nu.shape() != (n, n) {
        return Err(Error::invalid("cov_nu_given_nu must be n x n"));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    let x = design(z);
    let y = DVector::from_column_slice(nu_hat);
    let (mut coef, _) = least_squares(&x, &y).ok_or_else(|| Error::Numerical("Z is rank deficient".into()))?;
    let df = (n - x.ncols()).max(1) as f64;
    let mean_diag = cov_nu_given_nu.diagonal().mean();
    let mut sigma = cov_nu_given_nu.clone();
    symmetrize(&mut sigma);

    let mut s2b = 0.0;
    let mut cov = DMatrix::zeros(x.ncols(), x.ncols());
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let rss = (&y - &x * &coef).norm_squared();
        s2b = (rss / df - mean_diag).max(0.0);
        let mut v = sigma.clone();
        for i in 0..n {
            v[(i, i)] += s2b;
        }
        let w = spd_inverse(&v).ok_or_else(|| Error::Numerical("IRLS weight matrix is singular".into()))?;
        let xtw = x.transpose() * &w;
        cov = spd_inverse(&(&xtw * &x)).ok_or_else(|| Error::Numerical("weighted normal matrix is singular".into()))?;
        let next = &cov * (&xtw * &y);
        let change = (&next - &coef).amax();
        coef = next;
        if change < tol {
            break;
        }
    }
    Ok(AlphaFit {
        alpha_hat: coef.iter().skip(1).copied().collect(),
        intercept: coef[0],
        cov_alpha: alpha_block(&cov),
        sigma2_b_hat: s2b,
        method: AlphaMethod::Irls,
        iterations,
    })
}
