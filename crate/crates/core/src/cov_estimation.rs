//! Estimation of the GOUP covariance parameters `(σ²_b, σ²_c, σ²_e, γ)` from
//! working-independence residuals.
//!
//! The total variance comes from a moment estimator on squared standardized
//! residuals. The serial part is fitted by nonlinear least squares to
//! products of standardized residuals for consecutive and symmetric pairs of
//! trips, with starting values from a binned log-log regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binning::{equal_count_ranges, sorted_median};
use crate::data::Panel;
use crate::error::{Error, Result};
use crate::gee::{fit_gee, FitConfig, GeeFit, VarianceKind};
use crate::linalg::least_squares;
use crate::subject_level::{alpha_irls, alpha_ls, subject_covariates, IRLS_MAX_ITER, IRLS_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovMethod {
    /// Fixed subject effects; `σ²_b` from the LS regression of `ν̂` on `Z`.
    FseLs,
    /// Fixed subject effects; `σ²_b` from the IRLS moment step.
    FseIrls,
    /// No fixed subject effects; `σ²_b` fitted jointly with the serial part.
    NoFse,
}

impl CovMethod {
    pub fn uses_fse(self) -> bool {
        !matches!(self, CovMethod::NoFse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovParamEstimate {
    pub sigma2_b: Option<f64>,
    pub sigma2_c: f64,
    pub sigma2_e: f64,
    pub gamma: f64,
    pub method: CovMethod,
    /// `false` when the nonlinear regression failed and the values are the
    /// data-driven starting values.
    pub converged: bool,
    /// Set when not even starting values could be computed; the values are
    /// then fallback defaults.
    pub na_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    Consecutive,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPair {
    pub gap: f64,
    pub product: f64,
    pub kind: PairKind,
}

pub const DEFAULT_BINS: usize = 20;
pub const GAMMA_MIN: f64 = 1e-2;
pub const GAMMA_MAX: f64 = 1e5;
/// Bins whose mean product does not exceed this are dropped from the
/// log-log regression.
const MIN_BIN_PRODUCT: f64 = 1e-6;
const NLS_MAX_ITER: usize = 100;
const NLS_REL_TOL: f64 = 1e-10;
/// Below this `σ²_c` the decay rate is not identified.
const MIN_SIGMA2_C: f64 = 1e-8;
/// Floor applied to starting values of the no-FSE fit, which works in logs.
const START_FLOOR: f64 = 1e-4;
const FALLBACK_GAMMA: f64 = 100.0;

fn check_fitted(panel: &Panel, fitted: &[Option<Vec<f64>>]) -> Result<()> {
    if fitted.len() != panel.n_subjects() {
        return Err(Error::invalid("fitted means not aligned with the panel"));
    }
    for (s, mu) in panel.subjects().iter().zip(fitted) {
        if let Some(mu) = mu {
            if mu.len() != s.len() {
                return Err(Error::invalid(format!("fitted means for `{}` have the wrong length", s.id)));
            }
            if mu.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
                return Err(Error::precondition("fitted means must be positive"));
            }
        }
    }
    Ok(())
}

/// Consecutive pairs `(j, j+1)` and symmetric pairs `(j, k+1−j)`, `j < k+1−j`,
/// of every subject with fitted means. A subject with `k` trips contributes
/// `(k − 1) + ⌊k/2⌋` pairs.
pub fn build_pairs(panel: &Panel, fitted: &[Option<Vec<f64>>]) -> Result<Vec<ResidualPair>> {
    check_fitted(panel, fitted)?;
    let mut pairs = Vec::new();
    for (s, mu) in panel.subjects().iter().zip(fitted) {
        let Some(mu) = mu else { continue };
        let z: Vec<f64> = s.trips.iter().zip(mu).map(|(t, &m)| (t.count as f64 - m) / m).collect();
        let k = s.len();
        let pair = |a: usize, b: usize, kind| ResidualPair {
            gap: (s.trips[b].time - s.trips[a].time).abs(),
            product: z[a] * z[b],
            kind,
        };
        for j in 0..k.saturating_sub(1) {
            pairs.push(pair(j, j + 1, PairKind::Consecutive));
        }
        for j in 0..k / 2 {
            pairs.push(pair(j, k - 1 - j, PairKind::Symmetric));
        }
    }
    Ok(pairs)
}

/// Moment estimate of the total log-scale variance,
/// `log(1 + mean{(Y − μ̂)²/μ̂² − 1/μ̂})`, clamped at 0.
///
/// Under FSE fitted means this targets `σ²_c + σ²_e`; without FSE it targets
/// `σ²_b + σ²_c + σ²_e`.
pub fn moment_total_variance(panel: &Panel, fitted: &[Option<Vec<f64>>]) -> Result<f64> {
    check_fitted(panel, fitted)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, mu) in panel.subjects().iter().zip(fitted) {
        let Some(mu) = mu else { continue };
        for (t, &m) in s.trips.iter().zip(mu) {
            let r = t.count as f64 - m;
            sum += r * r / (m * m) - 1.0 / m;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::precondition("no fitted observations"));
    }
    let excess = sum / n as f64;
    Ok(if excess > 0.0 { excess.ln_1p() } else { 0.0 })
}

/// Starting values `(σ²_c, γ)` from a regression of
/// `log log(1 + mean product)` on the median gap over equal-count gap bins.
pub fn initial_values(pairs: &[ResidualPair], n_bins: usize) -> Result<(f64, f64)> {
    if n_bins < 2 {
        return Err(Error::invalid("at least 2 bins are needed"));
    }
    let mut sorted: Vec<(f64, f64)> = pairs.iter().map(|p| (p.gap, p.product)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let gaps: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for range in equal_count_ranges(sorted.len(), n_bins) {
        let mean = sorted[range.clone()].iter().map(|p| p.1).sum::<f64>() / range.len() as f64;
        if mean > MIN_BIN_PRODUCT {
            xs.push(sorted_median(&gaps[range]));
            ys.push(mean.ln_1p().ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::Numerical("fewer than 2 bins with positive mean product".into()));
    }
    let x = DMatrix::from_fn(xs.len(), 2, |r, c| if c == 0 { 1.0 } else { xs[r] });
    let (coef, _) = least_squares(&x, &DVector::from_vec(ys))
        .ok_or_else(|| Error::Numerical("usable bins share a single gap".into()))?;
    let sigma2_c = coef[0].exp();
    let gamma = (-coef[1]).clamp(GAMMA_MIN, GAMMA_MAX);
    if !sigma2_c.is_finite() {
        return Err(Error::Numerical("non-finite starting value".into()));
    }
    Ok((sigma2_c, gamma))
}

/// Parameters of the pair-product mean `exp{σ²_b + σ²_c e^{−γ d}} − 1`
/// (`σ²_b` absent under FSE).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub sigma2_b: Option<f64>,
    pub sigma2_c: f64,
    pub gamma: f64,
}

impl CurveParams {
    pub fn mean(&self, gap: f64) -> f64 {
        (self.sigma2_b.unwrap_or(0.0) + self.sigma2_c * (-self.gamma * gap).exp()).exp_m1()
    }

    fn to_log(self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3);
        if let Some(b) = self.sigma2_b {
            v.push(b.ln());
        }
        v.push(self.sigma2_c.ln());
        v.push(self.gamma.ln());
        v
    }

    fn from_log(v: &[f64]) -> Self {
        let (b, rest) = if v.len() == 3 { (Some(v[0].exp()), &v[1..]) } else { (None, v) };
        CurveParams {
            sigma2_b: b,
            sigma2_c: rest[0].exp(),
            gamma: rest[1].exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsFit {
    pub params: CurveParams,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn objective(pairs: &[ResidualPair], p: &CurveParams) -> f64 {
    pairs
        .iter()
        .map(|q| {
            let r = q.product - p.mean(q.gap);
            r * r
        })
        .sum()
}

/// Damped Gauss–Newton (Levenberg–Marquardt) fit of the pair-product mean,
/// with all parameters on the log scale.
///
/// Fails to converge when the iteration limit is reached, when `γ` leaves
/// `[GAMMA_MIN, GAMMA_MAX]`, or when `σ²_c` collapses to 0.
pub fn fit_pair_curve(pairs: &[ResidualPair], start: CurveParams) -> NlsFit {
    let mut phi = start.to_log();
    let np = phi.len();
    let mut current = objective(pairs, &start);
    let mut trace = vec![current];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    if !phi.iter().all(|v| v.is_finite()) || !current.is_finite() {
        return NlsFit {
            params: start,
            objective_trace: trace,
            iterations,
            converged,
        };
    }
    'outer: while iterations < NLS_MAX_ITER {
        iterations += 1;
        let p = CurveParams::from_log(&phi);
        let mut jtj = DMatrix::<f64>::zeros(np, np);
        let mut jtr = DVector::<f64>::zeros(np);
        let mut grad = vec![0.0; np];
        for q in pairs {
            let h = (-p.gamma * q.gap).exp();
            let sh = p.sigma2_c * h;
            let e = (p.sigma2_b.unwrap_or(0.0) + sh).exp();
            let r = q.product - (e - 1.0);
            let mut k = 0;
            if let Some(b) = p.sigma2_b {
                grad[k] = e * b;
                k += 1;
            }
            grad[k] = e * sh;
            grad[k + 1] = -e * sh * p.gamma * q.gap;
            for i in 0..np {
                jtr[i] += grad[i] * r;
                for j in 0..=i {
                    jtj[(i, j)] += grad[i] * grad[j];
                }
            }
        }
        for i in 0..np {
            for j in 0..i {
                jtj[(j, i)] = jtj[(i, j)];
            }
        }
        loop {
            let mut damped = jtj.clone();
            for i in 0..np {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let step = damped.cholesky().map(|c| c.solve(&jtr));
            if let Some(step) = step.filter(|s| s.iter().all(|v| v.is_finite())) {
                let cand: Vec<f64> = phi.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
                let value = objective(pairs, &CurveParams::from_log(&cand));
                if value.is_finite() && value <= current {
                    let decrease = current - value;
                    phi = cand;
                    current = value;
                    trace.push(current);
                    lambda = (lambda / 10.0).max(1e-12);
                    if decrease <= NLS_REL_TOL * current.max(f64::MIN_POSITIVE) {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // no descent direction left at working precision
                converged = true;
                break 'outer;
            }
        }
    }
    let params = CurveParams::from_log(&phi);
    let in_range = (GAMMA_MIN..=GAMMA_MAX).contains(&params.gamma) && params.sigma2_c > MIN_SIGMA2_C;
    NlsFit {
        params,
        objective_trace: trace,
        iterations,
        converged: converged && in_range && params.sigma2_b.is_none_or(f64::is_finite),
    }
}

fn fallback(method: CovMethod, total: f64, sigma2_b: Option<f64>) -> CovParamEstimate {
    let serial = (total - sigma2_b.unwrap_or(0.0)).max(0.0);
    CovParamEstimate {
        sigma2_b,
        sigma2_c: serial / 2.0,
        sigma2_e: serial / 2.0,
        gamma: FALLBACK_GAMMA,
        method,
        converged: false,
        na_flag: true,
    }
}

/// Full pipeline: working-independence fit(s), moment estimate, starting
/// values, and nonlinear regression.
pub fn fit_covariance(panel: &Panel, method: CovMethod, n_bins: usize) -> Result<CovParamEstimate> {
    let kind = if method == CovMethod::FseIrls {
        VarianceKind::Robust
    } else {
        VarianceKind::ModelBased
    };
    let fse_fit = fit_gee(panel, &FitConfig::independence(true).with_variance(kind))?;
    match method {
        CovMethod::FseLs | CovMethod::FseIrls => estimate_from_fse_fit(panel, &fse_fit, method, n_bins),
        CovMethod::NoFse => {
            let ls = estimate_from_fse_fit(panel, &fse_fit, CovMethod::FseLs, n_bins)?;
            let fit = fit_gee(panel, &FitConfig::independence(false).with_variance(VarianceKind::ModelBased))?;
            estimate_from_marginal_fit(panel, &fit, &ls)
        }
    }
}

/// FSE variants from an existing working-independence FSE fit. `FseIrls`
/// needs the fit's `cov_nu_given_nu`.
pub fn estimate_from_fse_fit(
    panel: &Panel,
    fit: &GeeFit,
    method: CovMethod,
    n_bins: usize,
) -> Result<CovParamEstimate> {
    if !fit.use_fse || !method.uses_fse() {
        return Err(Error::precondition("FSE covariance estimation needs an FSE fit and an FSE method"));
    }
    if fit.is_na() {
        return Ok(fallback(method, 0.0, None));
    }
    let fitted = fit.fitted_means(panel);
    let total = moment_total_variance(panel, &fitted)?;
    let pairs = build_pairs(panel, &fitted)?;

    let nu = fit.nu_hat.as_deref().unwrap_or(&[]);
    let z = subject_covariates(panel, &fit.fse_subjects);
    let alpha = match method {
        CovMethod::FseLs => alpha_ls(nu, &z),
        _ => match &fit.cov_nu_given_nu {
            Some(cov) => alpha_irls(nu, &z, cov, IRLS_MAX_ITER, IRLS_TOL),
            None => Err(Error::precondition("FSE-IRLS needs the covariance of the subject effects")),
        },
    };
    let sigma2_b = match alpha {
        Ok(a) => Some(a.sigma2_b_hat),
        Err(e) => {
            log::debug!("sigma2_b unavailable: {e}");
            None
        }
    };

    let (c0, g0) = match initial_values(&pairs, n_bins) {
        Ok(v) => v,
        Err(e) => {
            log::debug!("covariance starting values unavailable: {e}");
            return Ok(fallback(method, total, None).with_sigma2_b(sigma2_b));
        }
    };
    let start = CurveParams {
        sigma2_b: None,
        sigma2_c: c0,
        gamma: g0,
    };
    let nls = fit_pair_curve(&pairs, start);
    let chosen = if nls.converged { nls.params } else { start };
    Ok(CovParamEstimate {
        sigma2_b,
        sigma2_c: chosen.sigma2_c,
        sigma2_e: (total - chosen.sigma2_c).max(0.0),
        gamma: chosen.gamma,
        method,
        converged: nls.converged,
        na_flag: false,
    })
}

/// No-FSE variant from a working-independence fit without subject effects,
/// started from an FSE-LS estimate.
pub fn estimate_from_marginal_fit(
    panel: &Panel,
    fit: &GeeFit,
    fse_ls: &CovParamEstimate,
) -> Result<CovParamEstimate> {
    if fit.use_fse {
        return Err(Error::precondition("no-FSE covariance estimation needs a fit without FSE"));
    }
    let method = CovMethod::NoFse;
    if fit.is_na() {
        return Ok(fallback(method, 0.0, Some(0.0)));
    }
    let fitted = fit.fitted_means(panel);
    let total = moment_total_variance(panel, &fitted)?;
    if fse_ls.na_flag {
        return Ok(fallback(method, total, Some(total / 3.0)));
    }
    let pairs = build_pairs(panel, &fitted)?;
    let start = CurveParams {
        sigma2_b: Some(fse_ls.sigma2_b.unwrap_or(0.0).max(START_FLOOR)),
        sigma2_c: fse_ls.sigma2_c.max(START_FLOOR),
        gamma: fse_ls.gamma,
    };
    let nls = fit_pair_curve(&pairs, start);
    let chosen = if nls.converged { nls.params } else { start };
    let s2b = chosen.sigma2_b.unwrap_or(0.0);
    Ok(CovParamEstimate {
        sigma2_b: Some(s2b),
        sigma2_c: chosen.sigma2_c,
        sigma2_e: (total - s2b - chosen.sigma2_c).max(0.0),
        gamma: chosen.gamma,
        method,
        converged: nls.converged,
        na_flag: false,
    })
}

impl CovParamEstimate {
    fn with_sigma2_b(mut self, sigma2_b: Option<f64>) -> Self {
        self.sigma2_b = sigma2_b;
        self
    }

    /// The true parameters of a constant-rate GOUP model, as an estimate
    /// that never needs fitting (used for oracle comparisons).
    pub fn known(sigma2_b: f64, sigma2_c: f64, sigma2_e: f64, gamma: f64, method: CovMethod) -> Self {
        CovParamEstimate {
            sigma2_b: Some(sigma2_b),
            sigma2_c,
            sigma2_e,
            gamma,
            method,
            converged: true,
            na_flag: false,
        }
    }
}
