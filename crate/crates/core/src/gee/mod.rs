//! Estimating-equation fits of the marginal Poisson log-link model.
//!
//! Two mean structures are supported:
//!
//! * without fixed subject effects, `μ_ij = m_ij exp(ν + α'Z_i + β'X_ij)`;
//! * with fixed subject effects (FSE), `μ_ij = m_ij exp(ν_i + β'X_ij)`.
//!
//! The estimating equation `Σ_c D_c' V_c^{-1} (Y_c − μ_c) = 0` is solved by
//! Fisher scoring, where `c` runs over clusters (subjects, or blocks of
//! trips in separated-block resampling) and `V_c` is either `diag(μ_c)`
//! (working independence) or the GOUP covariance of
//! [`assemble_working_covariance`]. Variances are the model-based `A^{-1}`
//! and the sandwich `A^{-1} B A^{-1}` with cluster-level score outer
//! products in `B`.

mod system;
mod working_cov;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cov_estimation::CovParamEstimate;
use crate::data::Panel;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_checked, matrix_rows, symmetrize};
use system::NormalSystem;
pub use working_cov::{assemble_working_covariance, covariance_at_times};

/// Working covariance used in the estimating equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkingCov {
    Independence,
    /// GOUP covariance with the given parameters.
    Supplied(CovParamEstimate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceKind {
    Robust,
    ModelBased,
    Both,
}

impl VarianceKind {
    fn robust(self) -> bool {
        matches!(self, VarianceKind::Robust | VarianceKind::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub use_fse: bool,
    pub working_cov: WorkingCov,
    pub variance_kind: VarianceKind,
    pub max_iter: usize,
    /// Convergence threshold on the largest absolute coefficient change.
    pub tol: f64,
    /// Update the working-independence solution by a single scoring step
    /// under the supplied covariance instead of iterating to convergence.
    pub one_step: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            use_fse: false,
            working_cov: WorkingCov::Independence,
            variance_kind: VarianceKind::Both,
            max_iter: 50,
            tol: 1e-8,
            one_step: false,
        }
    }
}

impl FitConfig {
    pub fn independence(use_fse: bool) -> Self {
        FitConfig {
            use_fse,
            ..FitConfig::default()
        }
    }

    /// One-step update under a supplied GOUP covariance.
    pub fn one_step(use_fse: bool, cov: CovParamEstimate) -> Self {
        FitConfig {
            use_fse,
            working_cov: WorkingCov::Supplied(cov),
            one_step: true,
            ..FitConfig::default()
        }
    }

    pub fn with_variance(mut self, kind: VarianceKind) -> Self {
        self.variance_kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.one_step && matches!(self.working_cov, WorkingCov::Independence) {
            return Err(Error::invalid("one-step fitting requires a supplied working covariance"));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::invalid("max_iter and tol must be positive"));
        }
        if let WorkingCov::Supplied(cp) = &self.working_cov {
            if !self.use_fse && cp.sigma2_b.is_none() {
                return Err(Error::invalid(
                    "a working covariance without fixed subject effects needs sigma2_b",
                ));
            }
        }
        Ok(())
    }
}

/// Why a fit produced no usable estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NaReason {
    /// Non-invertible normal equations.
    Singular,
    /// Working covariance not positive definite.
    NotPositiveDefinite,
    /// Scoring did not converge, or step halving failed.
    NotConverged,
    /// Fitted means overflowed.
    NonFinite,
    /// No subject carries information (e.g. every subject has zero counts).
    NoUsableSubjects,
    /// A required covariance-parameter estimate was itself NA.
    CovarianceUnavailable,
}

impl std::fmt::Display for NaReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NaReason::Singular => "normal equations are singular",
            NaReason::NotPositiveDefinite => "working covariance is not positive definite",
            NaReason::NotConverged => "scoring did not converge",
            NaReason::NonFinite => "fitted means are not finite",
            NaReason::NoUsableSubjects => "no subject with information",
            NaReason::CovarianceUnavailable => "covariance parameters unavailable",
        };
        f.write_str(s)
    }
}

/// A set of trips from one subject treated as an independent unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub subject: usize,
    /// Positions in the subject's trip list, ascending.
    pub trips: Vec<usize>,
}

/// Partition of (some of) a panel's trips into clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    clusters: Vec<Cluster>,
}

impl Clustering {
    /// One cluster per subject holding all of its trips.
    pub fn by_subject(panel: &Panel) -> Self {
        Clustering {
            clusters: panel
                .subjects()
                .iter()
                .enumerate()
                .map(|(i, s)| Cluster {
                    subject: i,
                    trips: (0..s.len()).collect(),
                })
                .collect(),
        }
    }

    /// Validates that clusters reference existing trips, each at most once.
    pub fn new(panel: &Panel, clusters: Vec<Cluster>) -> Result<Self> {
        let mut used: Vec<Vec<bool>> = panel.subjects().iter().map(|s| vec![false; s.len()]).collect();
        for c in &clusters {
            let flags = used
                .get_mut(c.subject)
                .ok_or_else(|| Error::invalid(format!("cluster subject {} out of range", c.subject)))?;
            if c.trips.is_empty() {
                return Err(Error::invalid("empty cluster"));
            }
            for w in c.trips.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::invalid("cluster trips must be strictly ascending"));
                }
            }
            for &j in &c.trips {
                match flags.get_mut(j) {
                    Some(f) if !*f => *f = true,
                    Some(_) => return Err(Error::invalid("trip assigned to two clusters")),
                    None => return Err(Error::invalid("cluster trip out of range")),
                }
            }
        }
        Ok(Clustering { clusters })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Result of [`fit_gee`].
///
/// Coefficients are ordered `(ν_1, …, ν_n, β)` with fixed subject effects
/// and `(ν, α, β)` without; both covariance matrices use that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeFit {
    pub use_fse: bool,
    pub param_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub beta_hat: Vec<f64>,
    /// Present only without fixed subject effects.
    pub alpha_hat: Option<Vec<f64>>,
    /// Present only without fixed subject effects.
    pub nu_hat_global: Option<f64>,
    /// `ν̂_i` for the subjects listed in `fse_subjects` (FSE fits only).
    pub nu_hat: Option<Vec<f64>>,
    /// Panel positions of the subjects carrying a `ν̂_i`.
    pub fse_subjects: Vec<usize>,
    /// Subjects left out of an FSE fit because all their counts are zero.
    pub dropped_subjects: Vec<String>,
    #[serde(with = "matrix_rows::option")]
    pub cov_robust: Option<DMatrix<f64>>,
    #[serde(with = "matrix_rows::option")]
    pub cov_model: Option<DMatrix<f64>>,
    /// Covariance of `(ν̂_1, …, ν̂_n)` given the subject effects, taken from
    /// the robust variance when available.
    #[serde(with = "matrix_rows::option")]
    pub cov_nu_given_nu: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub na: Option<NaReason>,
}

impl GeeFit {
    pub fn is_na(&self) -> bool {
        self.na.is_some()
    }

    fn theta_range(&self) -> std::ops::Range<usize> {
        let p_beta = self.beta_hat.len();
        let end = self.coefficients.len();
        let start = if self.use_fse {
            end - p_beta
        } else {
            1
        };
        start..end
    }

    /// Names of the regression coefficients of interest, `(α, β)` without
    /// FSE and `β` with FSE.
    pub fn theta_names(&self) -> Vec<String> {
        self.param_names[self.theta_range()].to_vec()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.coefficients[self.theta_range()].to_vec()
    }

    pub fn cov(&self, kind: VarianceKind) -> Option<&DMatrix<f64>> {
        match kind {
            VarianceKind::ModelBased => self.cov_model.as_ref(),
            VarianceKind::Robust | VarianceKind::Both => self.cov_robust.as_ref(),
        }
    }

    /// Covariance block of [`GeeFit::theta`].
    pub fn cov_theta(&self, kind: VarianceKind) -> Option<DMatrix<f64>> {
        let r = self.theta_range();
        self.cov(kind)
            .map(|m| m.view((r.start, r.start), (r.len(), r.len())).into_owned())
    }

    /// Standard error of coefficient `index` (in `coefficients` order).
    pub fn se(&self, index: usize, kind: VarianceKind) -> Option<f64> {
        let v = self.cov(kind)?[(index, index)];
        (v >= 0.0).then(|| v.sqrt())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// Position of `β_k` in `coefficients`.
    pub fn beta_index(&self, k: usize) -> usize {
        self.coefficients.len() - self.beta_hat.len() + k
    }

    /// Fitted means for every trip of `panel`; `None` for subjects without a
    /// subject effect in an FSE fit.
    pub fn fitted_means(&self, panel: &Panel) -> Vec<Option<Vec<f64>>> {
        let mut slot = vec![None; panel.n_subjects()];
        for (k, &i) in self.fse_subjects.iter().enumerate() {
            if i < slot.len() {
                slot[i] = Some(k);
            }
        }
        let beta = &self.beta_hat;
        panel
            .subjects()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let base = if self.use_fse {
                    self.nu_hat.as_ref()?.get(slot[i]?).copied()?
                } else {
                    let alpha = self.alpha_hat.as_deref().unwrap_or(&[]);
                    self.nu_hat_global.unwrap_or(0.0) + dot(alpha, &s.covariates)
                };
                Some(
                    s.trips
                        .iter()
                        .map(|t| t.offset * (base + dot(beta, &t.covariates)).exp())
                        .collect(),
                )
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the marginal model with one cluster per subject.
pub fn fit_gee(panel: &Panel, config: &FitConfig) -> Result<GeeFit> {
    fit_gee_clustered(panel, &Clustering::by_subject(panel), config)
}

/// Fits the marginal model on the trips covered by `clustering`.
///
/// Subject effects (with FSE) are shared by every cluster of a subject; the
/// working covariance and the sandwich use clusters as independent units.
///
/// Precondition violations are errors. Numerical failures produce a fit with
/// `na` set.
pub fn fit_gee_clustered(panel: &Panel, clustering: &Clustering, config: &FitConfig) -> Result<GeeFit> {
    config.validate()?;
    let problem = Problem::new(panel, clustering, config.use_fse)?;
    let cov = match &config.working_cov {
        WorkingCov::Independence => None,
        WorkingCov::Supplied(cp) => {
            if cp.na_flag {
                return Ok(problem.na_fit(NaReason::CovarianceUnavailable, 0));
            }
            Some(cp)
        }
    };
    if problem.slots.is_empty() && config.use_fse {
        return Ok(problem.na_fit(NaReason::NoUsableSubjects, 0));
    }

    let start = problem.initial_theta();
    let Some(start) = start else {
        return Ok(problem.na_fit(NaReason::NoUsableSubjects, 0));
    };

    let (theta, iterations, converged) = if config.one_step {
        let wi = problem.iterate(start, None, config);
        let (theta0, iters) = match wi {
            Ok((t, i, true)) => (t, i),
            Ok((_, i, false)) => return Ok(problem.na_fit(NaReason::NotConverged, i)),
            Err((reason, i)) => return Ok(problem.na_fit(reason, i)),
        };
        match problem.scoring_step(&theta0, cov) {
            Ok(delta) => {
                let theta1: Vec<f64> = theta0.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                (theta1, iters + 1, true)
            }
            Err(reason) => return Ok(problem.na_fit(reason, iters + 1)),
        }
    } else {
        match problem.iterate(start, cov, config) {
            Ok(r) => r,
            Err((reason, i)) => return Ok(problem.na_fit(reason, i)),
        }
    };
    if !converged {
        let mut fit = problem.build_fit(theta, None, None, iterations, false);
        fit.na = Some(NaReason::NotConverged);
        return Ok(fit);
    }
    match problem.variances(&theta, cov, config.variance_kind) {
        Ok((robust, model)) => Ok(problem.build_fit(theta, robust, Some(model), iterations, true)),
        Err(reason) => {
            let mut fit = problem.build_fit(theta, None, None, iterations, true);
            fit.na = Some(reason);
            Ok(fit)
        }
    }
}

/// Recomputes `(robust, model-based)` covariances of a converged fit, using
/// the working covariance of `config`.
pub fn sandwich_variance(panel: &Panel, fit: &GeeFit, config: &FitConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    sandwich_variance_clustered(panel, &Clustering::by_subject(panel), fit, config)
}

/// [`sandwich_variance`] with an explicit cluster structure.
pub fn sandwich_variance_clustered(
    panel: &Panel,
    clustering: &Clustering,
    fit: &GeeFit,
    config: &FitConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    config.validate()?;
    if fit.is_na() {
        return Err(Error::precondition("fit is NA"));
    }
    let problem = Problem::new(panel, clustering, fit.use_fse)?;
    if problem.n_params() != fit.coefficients.len() || problem.slot_subjects != fit.fse_subjects {
        return Err(Error::precondition("fit does not match the panel and clustering"));
    }
    let cov = match &config.working_cov {
        WorkingCov::Independence => None,
        WorkingCov::Supplied(cp) => Some(cp),
    };
    let (robust, model) = problem
        .variances(&fit.coefficients, cov, VarianceKind::Both)
        .map_err(|r| Error::Numerical(r.to_string()))?;
    Ok((robust.expect("robust requested"), model))
}

/// Per-cluster pieces of the estimating equation.
struct ClusterTerms {
    slot: Option<usize>,
    /// `D_c' V_c^{-1} D_c` over the cluster's local parameters.
    a: DMatrix<f64>,
    /// `D_c' V_c^{-1} r_c`.
    u: DVector<f64>,
}

struct Problem<'a> {
    panel: &'a Panel,
    clusters: Vec<(Cluster, Option<usize>)>,
    fse: bool,
    p_z: usize,
    p_x: usize,
    /// Subject-effect slot of each panel subject (FSE).
    slots: Vec<Option<usize>>,
    slot_subjects: Vec<usize>,
    dropped: Vec<String>,
}

const MAX_HALVINGS: usize = 5;

impl<'a> Problem<'a> {
    fn new(panel: &'a Panel, clustering: &Clustering, fse: bool) -> Result<Self> {
        let n = panel.n_subjects();
        let mut trips_in = vec![0usize; n];
        let mut counts_in = vec![0u64; n];
        for c in clustering.clusters() {
            let s = panel
                .subjects()
                .get(c.subject)
                .ok_or_else(|| Error::invalid("cluster subject out of range"))?;
            trips_in[c.subject] += c.trips.len();
            for &j in &c.trips {
                counts_in[c.subject] += s.trips.get(j).ok_or_else(|| Error::invalid("cluster trip out of range"))?.count;
            }
        }
        let mut slots = vec![None; n];
        let mut slot_subjects = Vec::new();
        let mut dropped = Vec::new();
        if fse {
            for i in 0..n {
                if trips_in[i] == 0 {
                    continue;
                }
                if trips_in[i] < 2 {
                    return Err(Error::precondition(format!(
                        "subject `{}` has fewer than 2 trips; fixed subject effects need at least 2",
                        panel.subjects()[i].id
                    )));
                }
                if counts_in[i] == 0 {
                    log::debug!(
                        "subject `{}` has only zero counts; dropped from the fixed-effects fit",
                        panel.subjects()[i].id
                    );
                    dropped.push(panel.subjects()[i].id.clone());
                    continue;
                }
                slots[i] = Some(slot_subjects.len());
                slot_subjects.push(i);
            }
        }
        let clusters = clustering
            .clusters()
            .iter()
            .filter(|c| !fse || slots[c.subject].is_some())
            .map(|c| (c.clone(), slots[c.subject]))
            .collect();
        Ok(Problem {
            panel,
            clusters,
            fse,
            p_z: panel.p_z(),
            p_x: panel.p_x(),
            slots,
            slot_subjects,
            dropped,
        })
    }

    fn n_params(&self) -> usize {
        if self.fse {
            self.slot_subjects.len() + self.p_x
        } else {
            1 + self.p_z + self.p_x
        }
    }

    fn local_dim(&self) -> usize {
        if self.fse {
            1 + self.p_x
        } else {
            1 + self.p_z + self.p_x
        }
    }

    fn beta_offset(&self) -> usize {
        self.n_params() - self.p_x
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_params());
        if self.fse {
            for &i in &self.slot_subjects {
                names.push(format!("nu[{}]", self.panel.subjects()[i].id));
            }
        } else {
            names.push("nu".to_string());
            for z in self.panel.z_names() {
                names.push(format!("alpha[{z}]"));
            }
        }
        for x in self.panel.x_names() {
            names.push(format!("beta[{x}]"));
        }
        names
    }

    /// Log of the pooled rate for the intercepts, zeros elsewhere.
    fn initial_theta(&self) -> Option<Vec<f64>> {
        let mut theta = vec![0.0; self.n_params()];
        let mut y = vec![0.0; self.panel.n_subjects()];
        let mut m = vec![0.0; self.panel.n_subjects()];
        for (c, _) in &self.clusters {
            let s = &self.panel.subjects()[c.subject];
            for &j in &c.trips {
                y[c.subject] += s.trips[j].count as f64;
                m[c.subject] += s.trips[j].offset;
            }
        }
        if self.fse {
            for (k, &i) in self.slot_subjects.iter().enumerate() {
                theta[k] = (y[i] / m[i]).ln();
            }
        } else {
            let (ys, ms): (f64, f64) = (y.iter().sum(), m.iter().sum());
            if !(ys > 0.0) {
                return None;
            }
            theta[0] = (ys / ms).ln();
        }
        Some(theta)
    }

    fn base_eta(&self, theta: &[f64], subject: usize, slot: Option<usize>) -> f64 {
        if self.fse {
            theta[slot.expect("FSE cluster has a slot")]
        } else {
            theta[0] + dot(&theta[1..1 + self.p_z], &self.panel.subjects()[subject].covariates)
        }
    }

    /// Terms of one cluster plus its Poisson quasi-log-likelihood.
    fn cluster_terms(
        &self,
        cluster: &Cluster,
        slot: Option<usize>,
        theta: &[f64],
        cov: Option<&CovParamEstimate>,
    ) -> std::result::Result<(ClusterTerms, f64), NaReason> {
        let subject = &self.panel.subjects()[cluster.subject];
        let base = self.base_eta(theta, cluster.subject, slot);
        let beta = &theta[self.beta_offset()..];
        let q = self.local_dim();
        let k = cluster.trips.len();
        let mut x = DMatrix::zeros(k, q);
        let mut mu = Vec::with_capacity(k);
        let mut resid = Vec::with_capacity(k);
        let mut loglik = 0.0;
        for (r, &j) in cluster.trips.iter().enumerate() {
            let t = &subject.trips[j];
            let eta = t.offset.ln() + base + dot(beta, &t.covariates);
            let m = eta.exp();
            if !(m.is_finite() && m > 0.0) {
                return Err(NaReason::NonFinite);
            }
            let y = t.count as f64;
            loglik += y * eta - m;
            x[(r, 0)] = 1.0;
            let mut col = 1;
            if !self.fse {
                for &z in &subject.covariates {
                    x[(r, col)] = z;
                    col += 1;
                }
            }
            for &v in &t.covariates {
                x[(r, col)] = v;
                col += 1;
            }
            mu.push(m);
            resid.push(y - m);
        }
        let (a, u) = match cov {
            None => {
                let mut a = DMatrix::zeros(q, q);
                let mut u = DVector::zeros(q);
                for r in 0..k {
                    for i in 0..q {
                        let xi = x[(r, i)];
                        u[i] += xi * resid[r];
                        let w = mu[r] * xi;
                        for l in 0..=i {
                            a[(i, l)] += w * x[(r, l)];
                        }
                    }
                }
                for i in 0..q {
                    for l in 0..i {
                        a[(l, i)] = a[(i, l)];
                    }
                }
                (a, u)
            }
            Some(cp) => {
                let times: Vec<f64> = cluster.trips.iter().map(|&j| subject.trips[j].time).collect();
                let v = covariance_at_times(&times, &mu, cp, self.fse).map_err(|_| NaReason::NotPositiveDefinite)?;
                let chol = cholesky_checked(&v).ok_or(NaReason::NotPositiveDefinite)?;
                let mut d = x;
                for r in 0..k {
                    for i in 0..q {
                        d[(r, i)] *= mu[r];
                    }
                }
                let w = chol.solve(&d);
                let s = chol.solve(&DVector::from_vec(resid));
                let mut a = d.transpose() * w;
                symmetrize(&mut a);
                (a, d.transpose() * s)
            }
        };
        Ok((ClusterTerms { slot, a, u }, loglik))
    }

    fn evaluate(
        &self,
        theta: &[f64],
        cov: Option<&CovParamEstimate>,
    ) -> std::result::Result<(Vec<ClusterTerms>, f64), NaReason> {
        let mut terms = Vec::with_capacity(self.clusters.len());
        let mut loglik = 0.0;
        for (c, slot) in &self.clusters {
            let (t, l) = self.cluster_terms(c, *slot, theta, cov)?;
            loglik += l;
            terms.push(t);
        }
        Ok((terms, loglik))
    }

    fn loglik(&self, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        for (c, slot) in &self.clusters {
            let s = &self.panel.subjects()[c.subject];
            let base = self.base_eta(theta, c.subject, *slot);
            let beta = &theta[self.beta_offset()..];
            for &j in &c.trips {
                let t = &s.trips[j];
                let eta = t.offset.ln() + base + dot(beta, &t.covariates);
                total += t.count as f64 * eta - eta.exp();
            }
        }
        total
    }

    /// Full-length score of a cluster.
    fn full_score(&self, t: &ClusterTerms) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_params());
        self.scatter_score(t, &mut g);
        g
    }

    fn scatter_score(&self, t: &ClusterTerms, g: &mut DVector<f64>) {
        if self.fse {
            g[t.slot.expect("slot")] += t.u[0];
            let off = self.beta_offset();
            for i in 0..self.p_x {
                g[off + i] += t.u[1 + i];
            }
        } else {
            *g += &t.u;
        }
    }

    fn system(&self, terms: &[ClusterTerms]) -> std::result::Result<(NormalSystem, DVector<f64>), NaReason> {
        let np = self.n_params();
        let mut score = DVector::zeros(np);
        for t in terms {
            self.scatter_score(t, &mut score);
        }
        let sys = if self.fse {
            let n = self.slot_subjects.len();
            let p = self.p_x;
            let mut diag = vec![0.0; n];
            let mut cross = DMatrix::zeros(n, p);
            let mut m = DMatrix::zeros(p, p);
            for t in terms {
                let s = t.slot.expect("slot");
                diag[s] += t.a[(0, 0)];
                for i in 0..p {
                    cross[(s, i)] += t.a[(1 + i, 0)];
                    for j in 0..p {
                        m[(i, j)] += t.a[(1 + i, 1 + j)];
                    }
                }
            }
            NormalSystem::arrow(diag, cross, m)?
        } else {
            let mut a = DMatrix::zeros(np, np);
            for t in terms {
                a += &t.a;
            }
            NormalSystem::dense(a)?
        };
        Ok((sys, score))
    }

    fn scoring_step(
        &self,
        theta: &[f64],
        cov: Option<&CovParamEstimate>,
    ) -> std::result::Result<DVector<f64>, NaReason> {
        let (terms, _) = self.evaluate(theta, cov)?;
        let (sys, score) = self.system(&terms)?;
        let delta = sys.solve(&score);
        if delta.iter().all(|d| d.is_finite()) {
            Ok(delta)
        } else {
            Err(NaReason::NonFinite)
        }
    }

    /// Fisher scoring from `theta`. Under working independence each step is
    /// halved (up to five times) until the Poisson quasi-log-likelihood does
    /// not decrease. Returns `(theta, iterations, converged)`.
    #[allow(clippy::type_complexity)]
    fn iterate(
        &self,
        mut theta: Vec<f64>,
        cov: Option<&CovParamEstimate>,
        config: &FitConfig,
    ) -> std::result::Result<(Vec<f64>, usize, bool), (NaReason, usize)> {
        let mut current = if cov.is_none() { self.loglik(&theta) } else { 0.0 };
        for iter in 1..=config.max_iter {
            let delta = self.scoring_step(&theta, cov).map_err(|r| (r, iter))?;
            let mut accepted = None;
            let mut scale = 1.0;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + scale * d).collect();
                if cov.is_none() {
                    let l = self.loglik(&cand);
                    if l.is_finite() && l >= current - 1e-10 * (1.0 + current.abs()) {
                        current = l;
                        accepted = Some(cand);
                        break;
                    }
                } else if self.evaluate_means_finite(&cand) {
                    accepted = Some(cand);
                    break;
                }
                scale *= 0.5;
            }
            let Some(next) = accepted else {
                return Err((NaReason::NotConverged, iter));
            };
            let change = next
                .iter()
                .zip(&theta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            theta = next;
            if change < config.tol {
                return Ok((theta, iter, true));
            }
        }
        Ok((theta, config.max_iter, false))
    }

    fn evaluate_means_finite(&self, theta: &[f64]) -> bool {
        self.loglik(theta).is_finite()
    }

    /// `(robust, model-based)` covariance at `theta`.
    #[allow(clippy::type_complexity)]
    fn variances(
        &self,
        theta: &[f64],
        cov: Option<&CovParamEstimate>,
        kind: VarianceKind,
    ) -> std::result::Result<(Option<DMatrix<f64>>, DMatrix<f64>), NaReason> {
        let (terms, _) = self.evaluate(theta, cov)?;
        let (sys, _) = self.system(&terms)?;
        let mut model = sys.inverse();
        symmetrize(&mut model);
        let robust = kind.robust().then(|| {
            let np = sys.dim();
            let mut meat = DMatrix::zeros(np, np);
            for t in &terms {
                let h = sys.solve(&self.full_score(t));
                meat.ger(1.0, &h, &h, 1.0);
            }
            symmetrize(&mut meat);
            meat
        });
        let finite = model.iter().all(|v| v.is_finite())
            && robust.as_ref().is_none_or(|r| r.iter().all(|v| v.is_finite()));
        if finite {
            Ok((robust, model))
        } else {
            Err(NaReason::NonFinite)
        }
    }

    fn build_fit(
        &self,
        theta: Vec<f64>,
        robust: Option<DMatrix<f64>>,
        model: Option<DMatrix<f64>>,
        iterations: usize,
        converged: bool,
    ) -> GeeFit {
        let boff = self.beta_offset();
        let n_slots = self.slot_subjects.len();
        let nu_block = |m: &DMatrix<f64>| m.view((0, 0), (n_slots, n_slots)).into_owned();
        let cov_nu_given_nu = if self.fse {
            robust.as_ref().or(model.as_ref()).map(nu_block)
        } else {
            None
        };
        GeeFit {
            use_fse: self.fse,
            param_names: self.param_names(),
            beta_hat: theta[boff..].to_vec(),
            alpha_hat: (!self.fse).then(|| theta[1..1 + self.p_z].to_vec()),
            nu_hat_global: (!self.fse).then(|| theta[0]),
            nu_hat: self.fse.then(|| theta[..n_slots].to_vec()),
            fse_subjects: self.slot_subjects.clone(),
            dropped_subjects: self.dropped.clone(),
            coefficients: theta,
            cov_robust: robust,
            cov_model: model,
            cov_nu_given_nu,
            iterations,
            converged,
            na: None,
        }
    }

    fn na_fit(&self, reason: NaReason, iterations: usize) -> GeeFit {
        let theta = vec![f64::NAN; self.n_params()];
        let mut fit = self.build_fit(theta, None, None, iterations, false);
        fit.na = Some(reason);
        fit
    }
}
