//! Marginal analysis of longitudinal count data observed as a few very long
//! per-subject sequences.
//!
//! The crate covers the whole workflow around a Poisson log-link marginal
//! mean model `E(Y_ij) = m_ij exp(nu + alpha'Z_i + beta'X_ij)`:
//!
//! * [`data`] holds the panel types and CSV interchange.
//! * [`simulate`] draws panels from the Gauss–Ornstein–Uhlenbeck–Poisson
//!   (GOUP) model, including a time-varying decay rate.
//! * [`gee`] fits the model by estimating equations, with or without fixed
//!   subject effects, under working independence or a GOUP working
//!   covariance, and computes sandwich and model-based variances.
//! * [`cov_estimation`] recovers the GOUP covariance parameters from
//!   working-independence residuals.
//! * [`subject_level`] regresses estimated subject effects on subject-level
//!   covariates (least squares and iteratively reweighted least squares).
//! * [`wcr`] implements within-cluster resampling, including separated blocks.
//! * [`diagnostics`] bins standardized residual products by gap time.
//! * [`harness`] runs Monte Carlo scenarios and summarizes bias, spread,
//!   standard errors and coverage.

pub mod binning;
pub mod cov_estimation;
pub mod data;
pub mod diagnostics;
mod error;
pub mod gee;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod simulate;
pub mod subject_level;
pub mod wcr;

pub use cov_estimation::{CovMethod, CovParamEstimate, ResidualPair};
pub use data::{Panel, PanelSchema, Subject, TripRecord};
pub use error::{Error, Result};
pub use gee::{Clustering, FitConfig, GeeFit, NaReason, VarianceKind, WorkingCov};
pub use harness::{Estimator, Scenario, ScenarioSummary};
pub use simulate::{DesignSpec, GammaSpec, GoupParams};
pub use subject_level::{AlphaFit, AlphaMethod};
pub use wcr::{SamplingScheme, WcrResult};
