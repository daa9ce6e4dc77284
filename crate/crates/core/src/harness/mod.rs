//! Monte Carlo scenario runner.
//!
//! A [`Scenario`] fixes a simulation design, the generating parameters and a
//! list of [`Estimator`]s. Every replicate simulates one panel, runs every
//! estimator on it, and records an estimate and standard error per reported
//! parameter (or NA). The summary gives empirical bias, SD, median SE,
//! coverage of 95% Wald intervals and the percentage of NA replicates.
//!
//! Replicate `r` draws from a generator seeded with `seed ^ r`, and
//! replicates are collected in order before summarizing, so results do not
//! depend on the number of worker threads.

mod presets;

use std::cell::OnceCell;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::median;
use crate::cov_estimation::{
    estimate_from_fse_fit, estimate_from_marginal_fit, CovMethod, CovParamEstimate, DEFAULT_BINS,
};
use crate::data::{fmt_real, Panel};
use crate::error::{Error, Result};
use crate::gee::{fit_gee, FitConfig, GeeFit, VarianceKind};
use crate::rng::{replicate_seed, seeded};
use crate::simulate::{simulate_panel, DesignSpec, GoupParams};
use crate::subject_level::{alpha_irls, alpha_ls, subject_covariates, AlphaMethod, IRLS_MAX_ITER, IRLS_TOL};
use crate::wcr::{run_wcr, SamplingScheme};

pub use presets::{paper_scenarios, preset, preset_names};

/// Normal quantile used for the nominal 95% intervals.
pub const Z_95: f64 = 1.96;

/// Working covariance used inside WCR subsample fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WcrWorking {
    Independence,
    /// FSE-LS estimate from the full sample, applied to every subsample
    /// with a one-step update.
    EstimatedCov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    /// `α` from a working-independence fit without subject effects.
    AlphaNoFse { variance: VarianceKind },
    /// `α` from regressing FSE estimates on `Z`.
    AlphaFse { method: AlphaMethod },
    /// `β` under working independence.
    BetaWi { fse: bool, variance: VarianceKind },
    /// `β` by a one-step FSE update under the FSE-LS covariance estimate.
    BetaEstimatedCov { variance: VarianceKind },
    /// The covariance parameters themselves (no standard errors).
    CovParams { method: CovMethod },
    /// `β` by within-cluster resampling.
    BetaWcr {
        scheme: SamplingScheme,
        reps: usize,
        working: WcrWorking,
        fse: bool,
        variance: VarianceKind,
    },
    /// Test double: reports the true value of every parameter of `params`
    /// with unit standard error.
    Oracle,
}

fn variance_label(v: VarianceKind) -> &'static str {
    match v {
        VarianceKind::Robust | VarianceKind::Both => "robust",
        VarianceKind::ModelBased => "model",
    }
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::AlphaNoFse { variance } => format!("alpha:no-fse:{}", variance_label(*variance)),
            Estimator::AlphaFse { method } => match method {
                AlphaMethod::Ls => "alpha:fse:ls".into(),
                AlphaMethod::Irls => "alpha:fse:irls".into(),
            },
            Estimator::BetaWi { fse, variance } => {
                format!("beta:wi:{}:{}", if *fse { "fse" } else { "no-fse" }, variance_label(*variance))
            }
            Estimator::BetaEstimatedCov { variance } => format!("beta:ecm:fse:{}", variance_label(*variance)),
            Estimator::CovParams { method } => match method {
                CovMethod::FseLs => "cov:fse-ls".into(),
                CovMethod::FseIrls => "cov:fse-irls".into(),
                CovMethod::NoFse => "cov:no-fse".into(),
            },
            Estimator::BetaWcr {
                scheme,
                reps,
                working,
                fse,
                variance,
            } => format!(
                "beta:wcr:{scheme}:L={reps}:{}:{}:{}",
                match working {
                    WcrWorking::Independence => "wi",
                    WcrWorking::EstimatedCov => "ecm",
                },
                if *fse { "fse" } else { "no-fse" },
                variance_label(*variance)
            ),
            Estimator::Oracle => "oracle".into(),
        }
    }

    /// Names of the parameters this estimator reports.
    pub fn params(&self) -> Vec<&'static str> {
        match self {
            Estimator::AlphaNoFse { .. } | Estimator::AlphaFse { .. } => vec!["alpha"],
            Estimator::CovParams { .. } => vec!["sigma2_b", "sigma2_c", "sigma2_e", "gamma"],
            Estimator::Oracle => vec!["alpha", "beta"],
            _ => vec!["beta"],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub design: DesignSpec,
    pub params: GoupParams,
    pub estimators: Vec<Estimator>,
    pub replicates: usize,
    pub seed: u64,
}

impl Scenario {
    /// True value of a reported parameter; NaN when undefined (e.g. `γ`
    /// under a time-varying rate).
    pub fn truth(&self, param: &str) -> f64 {
        match param {
            "alpha" => self.params.alpha.first().copied().unwrap_or(f64::NAN),
            "beta" => self.params.beta.first().copied().unwrap_or(f64::NAN),
            "sigma2_b" => self.params.sigma2_b,
            "sigma2_c" => self.params.sigma2_c,
            "sigma2_e" => self.params.sigma2_e,
            "gamma" => self.params.gamma.constant().unwrap_or(f64::NAN),
            _ => f64::NAN,
        }
    }

    /// `(α, β)` of the generating model.
    pub fn true_theta(&self) -> Vec<f64> {
        self.params.alpha.iter().chain(&self.params.beta).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("a scenario needs at least one replicate"));
        }
        if self.estimators.is_empty() {
            return Err(Error::invalid("a scenario needs at least one estimator"));
        }
        self.design.validate()?;
        self.params.validate()?;
        if self.params.alpha.len() != self.design.z_generator.dim()
            || self.params.beta.len() != self.design.x_generator.dim()
        {
            return Err(Error::invalid("effect dimensions do not match the design"));
        }
        for e in &self.estimators {
            if let Estimator::BetaWcr {
                scheme,
                reps,
                working,
                fse,
                ..
            } = e
            {
                scheme.validate()?;
                if *reps == 0 {
                    return Err(Error::invalid("WCR needs at least one repetition"));
                }
                if scheme.min_trips() > self.design.trips_per_subject {
                    return Err(Error::invalid(format!(
                        "scheme {scheme} needs more trips than the design provides"
                    )));
                }
                if *working == WcrWorking::EstimatedCov && !*fse {
                    return Err(Error::invalid("WCR with an estimated covariance requires FSE"));
                }
            }
        }
        Ok(())
    }
}

/// One parameter's outcome in one replicate; `estimate = None` marks NA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub estimate: Option<f64>,
    pub se: Option<f64>,
}

impl Outcome {
    const NA: Outcome = Outcome {
        estimate: None,
        se: None,
    };

    fn new(estimate: f64, se: Option<f64>) -> Self {
        if !estimate.is_finite() {
            return Outcome::NA;
        }
        match se {
            Some(s) if !(s.is_finite() && s >= 0.0) => Outcome::NA,
            _ => Outcome {
                estimate: Some(estimate),
                se,
            },
        }
    }
}

/// Per-replicate fits shared by several estimators.
struct Context<'a> {
    panel: &'a Panel,
    seed: u64,
    wi_fse: OnceCell<Option<GeeFit>>,
    wi_marginal: OnceCell<Option<GeeFit>>,
    fse_ls: OnceCell<Option<CovParamEstimate>>,
    ecm: OnceCell<Option<GeeFit>>,
}

fn usable(fit: Result<GeeFit>) -> Option<GeeFit> {
    match fit {
        Ok(f) if !f.is_na() => Some(f),
        Ok(f) => {
            log::debug!("fit NA: {:?}", f.na);
            None
        }
        Err(e) => {
            log::debug!("fit failed: {e}");
            None
        }
    }
}

impl<'a> Context<'a> {
    fn new(panel: &'a Panel, seed: u64) -> Self {
        Context {
            panel,
            seed,
            wi_fse: OnceCell::new(),
            wi_marginal: OnceCell::new(),
            fse_ls: OnceCell::new(),
            ecm: OnceCell::new(),
        }
    }

    fn wi(&self, fse: bool) -> Option<&GeeFit> {
        let cell = if fse { &self.wi_fse } else { &self.wi_marginal };
        cell.get_or_init(|| usable(fit_gee(self.panel, &FitConfig::independence(fse))))
            .as_ref()
    }

    fn fse_ls(&self) -> Option<&CovParamEstimate> {
        self.fse_ls
            .get_or_init(|| {
                let fit = self.wi(true)?;
                estimate_from_fse_fit(self.panel, fit, CovMethod::FseLs, DEFAULT_BINS).ok()
            })
            .as_ref()
    }

    fn ecm(&self) -> Option<&GeeFit> {
        self.ecm
            .get_or_init(|| {
                let cov = self.fse_ls()?.clone();
                if cov.na_flag {
                    return None;
                }
                usable(fit_gee(self.panel, &FitConfig::one_step(true, cov)))
            })
            .as_ref()
    }

    fn beta_outcome(fit: &GeeFit, variance: VarianceKind) -> Outcome {
        let k = fit.beta_index(0);
        Outcome::new(fit.coefficients[k], fit.se(k, variance))
    }

    fn run(&self, estimator: &Estimator, scenario: &Scenario) -> Vec<Outcome> {
        let na = || vec![Outcome::NA; estimator.params().len()];
        match estimator {
            Estimator::AlphaNoFse { variance } => match self.wi(false) {
                Some(fit) => vec![Outcome::new(fit.coefficients[1], fit.se(1, *variance))],
                None => na(),
            },
            Estimator::AlphaFse { method } => {
                let Some(fit) = self.wi(true) else { return na() };
                let nu = fit.nu_hat.as_deref().unwrap_or(&[]);
                let z = subject_covariates(self.panel, &fit.fse_subjects);
                let res = match method {
                    AlphaMethod::Ls => alpha_ls(nu, &z),
                    AlphaMethod::Irls => match &fit.cov_nu_given_nu {
                        Some(c) => alpha_irls(nu, &z, c, IRLS_MAX_ITER, IRLS_TOL),
                        None => return na(),
                    },
                };
                match res {
                    Ok(a) => vec![Outcome::new(a.alpha_hat[0], Some(a.se(0)))],
                    Err(_) => na(),
                }
            }
            Estimator::BetaWi { fse, variance } => match self.wi(*fse) {
                Some(fit) => vec![Self::beta_outcome(fit, *variance)],
                None => na(),
            },
            Estimator::BetaEstimatedCov { variance } => match self.ecm() {
                Some(fit) => vec![Self::beta_outcome(fit, *variance)],
                None => na(),
            },
            Estimator::CovParams { method } => {
                let est = match method {
                    CovMethod::FseLs => self.fse_ls().cloned(),
                    CovMethod::FseIrls => self
                        .wi(true)
                        .and_then(|f| estimate_from_fse_fit(self.panel, f, CovMethod::FseIrls, DEFAULT_BINS).ok()),
                    CovMethod::NoFse => match (self.wi(false), self.fse_ls()) {
                        (Some(f), Some(ls)) => estimate_from_marginal_fit(self.panel, f, ls).ok(),
                        _ => None,
                    },
                };
                match est {
                    // nonconverged estimates are reported as NA, as in the
                    // paper's convergence-failure column
                    Some(e) if e.converged && !e.na_flag => vec![
                        Outcome::new(e.sigma2_b.unwrap_or(f64::NAN), None),
                        Outcome::new(e.sigma2_c, None),
                        Outcome::new(e.sigma2_e, None),
                        Outcome::new(e.gamma, None),
                    ],
                    _ => na(),
                }
            }
            Estimator::BetaWcr {
                scheme,
                reps,
                working,
                fse,
                variance,
            } => {
                let config = match working {
                    WcrWorking::Independence => FitConfig::independence(*fse),
                    WcrWorking::EstimatedCov => match self.fse_ls() {
                        Some(c) if !c.na_flag => FitConfig::one_step(*fse, c.clone()),
                        _ => return na(),
                    },
                }
                .with_variance(*variance);
                match run_wcr(self.panel, *scheme, *reps, &config, self.seed) {
                    // a negative variance is truncated to 0: the interval
                    // degenerates to the point estimate and almost surely
                    // misses, which is how the underestimation shows up
                    Ok(r) if !r.na_flag => {
                        let k = r.theta_wcr.len() - 1;
                        vec![Outcome::new(r.theta_wcr[k], Some(r.se(k).unwrap_or(0.0)))]
                    }
                    Ok(_) => na(),
                    Err(e) => {
                        log::debug!("WCR failed: {e}");
                        na()
                    }
                }
            }
            Estimator::Oracle => estimator
                .params()
                .iter()
                .map(|p| Outcome::new(scenario.truth(p), Some(1.0)))
                .collect(),
        }
    }
}

/// Outcomes of one replicate, indexed `[estimator][param]`.
pub type ReplicateOutcomes = Vec<Vec<Outcome>>;

/// Simulates replicate `r` of `scenario` and runs every estimator on it.
pub fn run_replicate(scenario: &Scenario, r: usize) -> Result<ReplicateOutcomes> {
    let seed = replicate_seed(scenario.seed, r as u64);
    let panel = simulate_panel(&scenario.params, &scenario.design, &mut seeded(seed))?;
    let ctx = Context::new(&panel, seed);
    Ok(scenario.estimators.iter().map(|e| ctx.run(e, scenario)).collect())
}

/// Summary statistics of one estimator and parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub param: String,
    pub bias: f64,
    pub sd: f64,
    pub median_se: f64,
    pub cp: f64,
    pub pct_na: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub replicates: usize,
    pub rows: Vec<SummaryRow>,
}

/// Summarizes the outcomes of one parameter against `truth`. Bias, SD,
/// median SE and coverage use non-NA replicates only; coverage and median
/// SE are NaN when the estimator reports no standard errors.
pub fn summarize(outcomes: &[Outcome], truth: f64) -> (f64, f64, f64, f64, f64, usize) {
    let used: Vec<&Outcome> = outcomes.iter().filter(|o| o.estimate.is_some()).collect();
    let n = used.len();
    let pct_na = if outcomes.is_empty() {
        f64::NAN
    } else {
        100.0 * (outcomes.len() - n) as f64 / outcomes.len() as f64
    };
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN, f64::NAN, pct_na, 0);
    }
    let est: Vec<f64> = used.iter().map(|o| o.estimate.expect("filtered")).collect();
    let mean = est.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (est.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    let ses: Vec<f64> = used.iter().filter_map(|o| o.se).collect();
    let (median_se, cp) = if ses.len() == n {
        let covered = used
            .iter()
            .filter(|o| (o.estimate.expect("filtered") - truth).abs() <= Z_95 * o.se.expect("checked"))
            .count();
        (median(&ses), covered as f64 / n as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    (mean - truth, sd, median_se, cp, pct_na, n)
}

/// Runs all replicates in parallel (within the current rayon pool) and
/// summarizes them.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioSummary> {
    let outcomes = run_outcomes(scenario)?;
    Ok(summarize_scenario(scenario, &outcomes))
}

/// Raw per-replicate outcomes, in replicate order.
pub fn run_outcomes(scenario: &Scenario) -> Result<Vec<ReplicateOutcomes>> {
    scenario.validate()?;
    (0..scenario.replicates)
        .into_par_iter()
        .map(|r| run_replicate(scenario, r))
        .collect()
}

pub fn summarize_scenario(scenario: &Scenario, outcomes: &[ReplicateOutcomes]) -> ScenarioSummary {
    let mut rows = Vec::new();
    for (e, est) in scenario.estimators.iter().enumerate() {
        for (p, param) in est.params().into_iter().enumerate() {
            let col: Vec<Outcome> = outcomes.iter().map(|o| o[e][p]).collect();
            let (bias, sd, median_se, cp, pct_na, n_used) = summarize(&col, scenario.truth(param));
            rows.push(SummaryRow {
                estimator: est.label(),
                param: param.to_string(),
                bias,
                sd,
                median_se,
                cp,
                pct_na,
                n_used,
            });
        }
    }
    ScenarioSummary {
        scenario: scenario.name.clone(),
        replicates: scenario.replicates,
        rows,
    }
}

impl ScenarioSummary {
    pub fn row(&self, estimator: &str, param: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.param == param)
    }

    /// CSV with columns `estimator,param,bias,sd,median_se,cp,pct_na`.
    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["estimator", "param", "bias", "sd", "median_se", "cp", "pct_na"])?;
        for r in &self.rows {
            out.write_record([
                r.estimator.clone(),
                r.param.clone(),
                fmt_real(r.bias),
                fmt_real(r.sd),
                fmt_real(r.median_se),
                fmt_real(r.cp),
                fmt_real(r.pct_na),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_exact_normal_toy() {
        let outcomes = [
            Outcome::new(1.1, Some(0.1)),
            Outcome::new(0.7, Some(0.1)),
            Outcome::NA,
            Outcome::new(0.95, Some(0.2)),
        ];
        let (bias, sd, med, cp, pct_na, n) = summarize(&outcomes, 1.0);
        assert_eq!(n, 3);
        assert!((bias - (-0.25 / 3.0)).abs() < 1e-12);
        let mean = 2.75 / 3.0;
        let var = [1.1, 0.7, 0.95].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 2.0;
        assert!((sd - var.sqrt()).abs() < 1e-12);
        assert_eq!(med, 0.1);
        // 1.1 covered (0.1 ≤ 0.196), 0.7 not, 0.95 covered
        assert!((cp - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(pct_na, 25.0);
    }

    #[test]
    fn missing_se_gives_nan_coverage() {
        let (_, _, med, cp, _, _) = summarize(&[Outcome::new(1.0, None), Outcome::new(2.0, None)], 1.5);
        assert!(med.is_nan() && cp.is_nan());
    }

    #[test]
    fn non_finite_estimate_is_na() {
        assert_eq!(Outcome::new(f64::NAN, Some(1.0)), Outcome::NA);
        assert_eq!(Outcome::new(1.0, Some(f64::INFINITY)), Outcome::NA);
    }
}
