//! GOUP working covariance of one cluster's counts.

use nalgebra::DMatrix;

use crate::cov_estimation::CovParamEstimate;
use crate::data::Subject;
use crate::error::{Error, Result};

/// Working covariance of a subject's counts at fitted means `mu`.
///
/// With fixed subject effects the covariance is conditional on the subject
/// effect:
///
/// * diagonal `μ_j + μ_j² (exp(σ²_c + σ²_e) − 1)`
/// * off-diagonal `μ_j μ_j' (exp(σ²_c e^{−γ|t_j − t_j'|}) − 1)`
///
/// Without them `σ²_b` enters both terms:
///
/// * diagonal `μ_j + μ_j² (exp(σ²_b + σ²_c + σ²_e) − 1)`
/// * off-diagonal `μ_j μ_j' (exp(σ²_b + σ²_c e^{−γ|t_j − t_j'|}) − 1)`
pub fn assemble_working_covariance(
    subject: &Subject,
    mu: &[f64],
    cov: &CovParamEstimate,
    use_fse: bool,
) -> Result<DMatrix<f64>> {
    if mu.len() != subject.len() {
        return Err(Error::invalid("fitted means not aligned with the subject's trips"));
    }
    covariance_at_times(&subject.times(), mu, cov, use_fse)
}

/// Same as [`assemble_working_covariance`] for explicit trip times.
pub fn covariance_at_times(
    times: &[f64],
    mu: &[f64],
    cov: &CovParamEstimate,
    use_fse: bool,
) -> Result<DMatrix<f64>> {
    if times.len() != mu.len() {
        return Err(Error::invalid("times and fitted means differ in length"));
    }
    if mu.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::precondition("fitted means must be positive"));
    }
    let shared = if use_fse {
        0.0
    } else {
        cov.sigma2_b
            .ok_or_else(|| Error::precondition("sigma2_b is required without fixed subject effects"))?
    };
    let (s2c, s2e, gamma) = (cov.sigma2_c, cov.sigma2_e, cov.gamma);
    if ![shared, s2c, s2e, gamma].iter().all(|v| v.is_finite()) {
        return Err(Error::precondition("covariance parameters must be finite"));
    }
    let k = mu.len();
    let diag_excess = (shared + s2c + s2e).exp_m1();
    let mut v = DMatrix::zeros(k, k);
    for j in 0..k {
        v[(j, j)] = mu[j] + mu[j] * mu[j] * diag_excess;
        for l in (j + 1)..k {
            let gap = (times[l] - times[j]).abs();
            let off = mu[j] * mu[l] * (shared + s2c * (-gamma * gap).exp()).exp_m1();
            v[(j, l)] = off;
            v[(l, j)] = off;
        }
    }
    Ok(v)
}
