//! Synthetic panels from the Gauss–Ornstein–Uhlenbeck–Poisson (GOUP) model.
//!
//! Conditional on a subject effect `b_i ~ N(0, σ²_b)`, a latent
//! Ornstein–Uhlenbeck path `c_i(t)` with variance `σ²_c`, and trip-level
//! noise `e_ij ~ N(0, σ²_e)`, counts are Poisson with mean
//! `m_ij exp(ν* + α'Z_i + β'X_ij + b_i + c_i(t_ij) + e_ij)`.
//!
//! The latent path is drawn with the exact Markov recursion on the observed
//! times, so any decay-rate function with a closed-form integral is
//! supported.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Panel, Subject, TripRecord};
use crate::error::{Error, Result};

/// Decay rate `γ(t)` of the latent serial process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaSpec {
    Constant(f64),
    /// Straight line from `start` at `t = 0` to `end` at `t = 1`.
    Linear { start: f64, end: f64 },
}

impl GammaSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GammaSpec::Constant(g) => g > 0.0 && g.is_finite(),
            GammaSpec::Linear { start, end } => {
                start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("decay rate must be positive: {self:?}")))
        }
    }

    /// `γ(t)`.
    pub fn rate(&self, t: f64) -> f64 {
        match *self {
            GammaSpec::Constant(g) => g,
            GammaSpec::Linear { start, end } => start + (end - start) * t,
        }
    }

    /// `∫_{t1}^{t2} γ(t) dt`, in closed form.
    pub fn integral(&self, t1: f64, t2: f64) -> f64 {
        match *self {
            GammaSpec::Constant(g) => g * (t2 - t1),
            GammaSpec::Linear { start, end } => {
                start * (t2 - t1) + 0.5 * (end - start) * (t2 * t2 - t1 * t1)
            }
        }
    }

    /// The constant rate, if any.
    pub fn constant(&self) -> Option<f64> {
        match *self {
            GammaSpec::Constant(g) => Some(g),
            GammaSpec::Linear { .. } => None,
        }
    }
}

/// Generative parameters of the GOUP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoupParams {
    pub nu_star: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma2_b: f64,
    pub sigma2_c: f64,
    pub sigma2_e: f64,
    pub gamma: GammaSpec,
}

impl GoupParams {
    /// `σ²_b = σ²_c = σ²_e = 1`, `α = β = 0`, with the given decay rate.
    pub fn unit_variances(gamma: GammaSpec) -> Self {
        GoupParams {
            nu_star: 0.0,
            alpha: vec![0.0],
            beta: vec![0.0],
            sigma2_b: 1.0,
            sigma2_c: 1.0,
            sigma2_e: 1.0,
            gamma,
        }
    }

    pub fn total_variance(&self) -> f64 {
        self.sigma2_b + self.sigma2_c + self.sigma2_e
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_b", self.sigma2_b),
            ("sigma2_c", self.sigma2_c),
            ("sigma2_e", self.sigma2_e),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        if !self.nu_star.is_finite() || self.alpha.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(Error::invalid("regression parameters must be finite"));
        }
        self.gamma.validate()
    }
}

/// Subject-level covariate generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ZGenerator {
    /// No subject-level covariates.
    None,
    /// One binary covariate, `Z_i ~ Bernoulli(p)`.
    Bernoulli(f64),
}

impl ZGenerator {
    pub fn dim(&self) -> usize {
        match self {
            ZGenerator::None => 0,
            ZGenerator::Bernoulli(_) => 1,
        }
    }
}

/// Custom trip covariate function: `(trip time, rng) -> X_ij`.
pub type TripCovariateFn = dyn Fn(f64, &mut dyn RngCore) -> Vec<f64> + Send + Sync;

/// Trip-level covariate generator.
#[derive(Clone)]
pub enum XGenerator {
    /// No trip-level covariates.
    None,
    /// `X_ij = t_ij`.
    TripTime,
    Custom { dim: usize, f: Arc<TripCovariateFn> },
}

impl XGenerator {
    pub fn dim(&self) -> usize {
        match self {
            XGenerator::None => 0,
            XGenerator::TripTime => 1,
            XGenerator::Custom { dim, .. } => *dim,
        }
    }
}

impl fmt::Debug for XGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            XGenerator::None => f.write_str("None"),
            XGenerator::TripTime => f.write_str("TripTime"),
            XGenerator::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim} }}"),
        }
    }
}

/// Study design of a simulated panel.
#[derive(Debug, Clone)]
pub struct DesignSpec {
    pub n_subjects: usize,
    pub trips_per_subject: usize,
    /// Mean of `log m_ij`.
    pub offset_log_mean: f64,
    /// Variance of `log m_ij`.
    pub offset_log_var: f64,
    pub z_generator: ZGenerator,
    pub x_generator: XGenerator,
    /// When set, `ν*` is calibrated so that `E(Y_ij)` equals this value and
    /// the `nu_star` in [`GoupParams`] is ignored.
    pub target_mean_count: Option<f64>,
}

impl DesignSpec {
    /// The driving-study design: log-mileage `N(1, 1)`, one Bernoulli(0.5)
    /// subject covariate, trip time as the trip covariate.
    pub fn driving_study(n_subjects: usize, trips_per_subject: usize, target_mean_count: Option<f64>) -> Self {
        DesignSpec {
            n_subjects,
            trips_per_subject,
            offset_log_mean: 1.0,
            offset_log_var: 1.0,
            z_generator: ZGenerator::Bernoulli(0.5),
            x_generator: XGenerator::TripTime,
            target_mean_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.trips_per_subject == 0 {
            return Err(Error::invalid("design needs at least one subject and one trip"));
        }
        if !(self.offset_log_var >= 0.0 && self.offset_log_var.is_finite() && self.offset_log_mean.is_finite()) {
            return Err(Error::invalid("offset log-variance must be a nonnegative real"));
        }
        if let ZGenerator::Bernoulli(p) = self.z_generator {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("Bernoulli probability out of range: {p}")));
            }
        }
        if let Some(t) = self.target_mean_count {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("target mean count must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn z_names(&self) -> Vec<String> {
        (0..self.z_generator.dim()).map(|i| if i == 0 { "z".into() } else { format!("z{}", i + 1) }).collect()
    }

    fn x_names(&self) -> Vec<String> {
        match &self.x_generator {
            XGenerator::None => Vec::new(),
            XGenerator::TripTime => vec!["x".into()],
            XGenerator::Custom { dim, .. } => (1..=*dim).map(|i| format!("x{i}")).collect(),
        }
    }
}

/// Draws the latent serial process at sorted `times`.
///
/// The path is stationary with variance `sigma2_c` and
/// `Cov{c(t1), c(t2)} = σ²_c exp(-∫_{t1}^{t2} γ)`.
pub fn sample_ou_path<R: Rng + ?Sized>(
    times: &[f64],
    sigma2_c: f64,
    gamma: GammaSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if times.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::precondition("times must be sorted ascending"));
    }
    if !(sigma2_c >= 0.0 && sigma2_c.is_finite()) {
        return Err(Error::invalid(format!("sigma2_c must be nonnegative, got {sigma2_c}")));
    }
    gamma.validate()?;
    if sigma2_c == 0.0 {
        return Ok(vec![0.0; times.len()]);
    }
    let sd = sigma2_c.sqrt();
    let mut path = Vec::with_capacity(times.len());
    let mut prev_t = 0.0;
    for (j, &t) in times.iter().enumerate() {
        let xi: f64 = StandardNormal.sample(rng);
        let c = if j == 0 {
            sd * xi
        } else {
            let rho = (-gamma.integral(prev_t, t)).exp();
            rho * path[j - 1] + sd * (1.0 - rho * rho).max(0.0).sqrt() * xi
        };
        path.push(c);
        prev_t = t;
    }
    Ok(path)
}

/// `ν*` making the marginal mean count equal `design.target_mean_count`.
///
/// Uses `E(Y) = E(m) E(e^{α'Z}) E(e^{β'X}) exp(ν* + (σ²_b+σ²_c+σ²_e)/2)`
/// with log-normal mileage, Bernoulli `Z` and `X` equal to a uniform trip
/// time.
pub fn calibrate_nu_star(design: &DesignSpec, params: &GoupParams) -> Result<f64> {
    let target = design
        .target_mean_count
        .ok_or_else(|| Error::invalid("target mean count not set"))?;
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::invalid(format!("target mean count must be positive, got {target}")));
    }
    let log_em = design.offset_log_mean + 0.5 * design.offset_log_var;
    let log_ez = match design.z_generator {
        ZGenerator::None => 0.0,
        ZGenerator::Bernoulli(p) => {
            let a = params.alpha.first().copied().unwrap_or(0.0);
            (1.0 - p + p * a.exp()).ln()
        }
    };
    let log_ex = match &design.x_generator {
        XGenerator::None => 0.0,
        XGenerator::TripTime => {
            let b = params.beta.first().copied().unwrap_or(0.0);
            if b.abs() < 1e-12 {
                0.0
            } else {
                (b.exp_m1() / b).ln()
            }
        }
        XGenerator::Custom { .. } => {
            if params.beta.iter().all(|&b| b == 0.0) {
                0.0
            } else {
                return Err(Error::invalid(
                    "cannot calibrate the intercept for a custom trip covariate generator with nonzero beta",
                ));
            }
        }
    };
    Ok(target.ln() - log_em - log_ez - log_ex - 0.5 * params.total_variance())
}

/// Draws the counts of one subject given its trip times, mileages and
/// covariates. Consumes the rng in a fixed order: `b_i`, the latent path,
/// then `(e_ij, Y_ij)` trip by trip.
pub fn simulate_subject_counts<R: Rng + ?Sized>(
    params: &GoupParams,
    nu_star: f64,
    z: &[f64],
    times: &[f64],
    offsets: &[f64],
    x: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<u64>> {
    let k = times.len();
    if offsets.len() != k || x.len() != k {
        return Err(Error::invalid("times, offsets and covariates must have equal length"));
    }
    let zeta: f64 = params.alpha.iter().zip(z).map(|(a, z)| a * z).sum();
    let b = draw_normal(params.sigma2_b, rng);
    let c = sample_ou_path(times, params.sigma2_c, params.gamma, rng)?;
    let mut counts = Vec::with_capacity(k);
    for j in 0..k {
        let e = draw_normal(params.sigma2_e, rng);
        let xb: f64 = params.beta.iter().zip(&x[j]).map(|(b, x)| b * x).sum();
        let lambda = offsets[j] * (nu_star + zeta + xb + b + c[j] + e).exp();
        counts.push(draw_poisson(lambda, rng));
    }
    Ok(counts)
}

fn draw_normal<R: Rng + ?Sized>(var: f64, rng: &mut R) -> f64 {
    let xi: f64 = StandardNormal.sample(rng);
    var.sqrt() * xi
}

// Poisson sampling is only defined for finite positive rates below ~1e19.
const MAX_RATE: f64 = 1e15;

fn draw_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    let lambda = lambda.min(MAX_RATE);
    let d = Poisson::new(lambda).expect("finite positive rate");
    d.sample(rng) as u64
}

/// Simulates a panel from the GOUP model.
///
/// Per subject the draw order is: `Z_i`, sorted uniform trip times,
/// log-mileages, trip covariates, then [`simulate_subject_counts`]. Subject
/// ids are `S001`, `S002`, ...
pub fn simulate_panel<R: Rng>(params: &GoupParams, design: &DesignSpec, rng: &mut R) -> Result<Panel> {
    params.validate()?;
    design.validate()?;
    if params.alpha.len() != design.z_generator.dim() || params.beta.len() != design.x_generator.dim() {
        return Err(Error::invalid(format!(
            "parameter dimensions (alpha {}, beta {}) do not match the design (z {}, x {})",
            params.alpha.len(),
            params.beta.len(),
            design.z_generator.dim(),
            design.x_generator.dim()
        )));
    }
    let nu_star = match design.target_mean_count {
        Some(_) => calibrate_nu_star(design, params)?,
        None => params.nu_star,
    };
    let offset_dist = Normal::new(design.offset_log_mean, design.offset_log_var.sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let width = design.n_subjects.to_string().len().max(3);
    let k = design.trips_per_subject;

    let mut subjects = Vec::with_capacity(design.n_subjects);
    for i in 0..design.n_subjects {
        let z = match design.z_generator {
            ZGenerator::None => Vec::new(),
            ZGenerator::Bernoulli(p) => vec![if rng.random::<f64>() < p { 1.0 } else { 0.0 }],
        };
        let mut times: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        times.sort_by(f64::total_cmp);
        let offsets: Vec<f64> = (0..k).map(|_| offset_dist.sample(rng).exp()).collect();
        let x: Vec<Vec<f64>> = match &design.x_generator {
            XGenerator::None => vec![Vec::new(); k],
            XGenerator::TripTime => times.iter().map(|&t| vec![t]).collect(),
            XGenerator::Custom { f, .. } => {
                let mut out = Vec::with_capacity(k);
                for &t in &times {
                    out.push(f(t, &mut *rng as &mut dyn RngCore));
                }
                out
            }
        };
        let counts = simulate_subject_counts(params, nu_star, &z, &times, &offsets, &x, rng)?;
        let trips = (0..k)
            .map(|j| TripRecord {
                trip_index: (j + 1) as u32,
                time: times[j],
                offset: offsets[j],
                covariates: x[j].clone(),
                count: counts[j],
            })
            .collect();
        subjects.push(Subject {
            id: format!("S{:0width$}", i + 1),
            covariates: z,
            trips,
        });
    }
    Panel::new(subjects, design.z_names(), design.x_names())
}
