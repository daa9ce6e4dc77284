//! Within-cluster resampling (WCR).
//!
//! Each repetition draws a subsample of trips from every subject, fits the
//! marginal model to it, and the `L` fits are combined: the estimate is the
//! average of the subsample estimates and the variance is the average
//! subsample variance minus the between-subsample sample covariance.
//!
//! Schemes:
//!
//! * one trip per subject;
//! * a simple random sample of `R` trips per subject;
//! * every `(S+1)`-th trip from a random start among the first `S+1`;
//! * separated blocks of `B` consecutive trips with `S` skipped trips
//!   between blocks, each block forming its own cluster.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Panel;
use crate::error::{Error, Result};
use crate::gee::{fit_gee_clustered, Cluster, Clustering, FitConfig, NaReason, VarianceKind};
use crate::linalg::{matrix_rows, symmetrize};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingScheme {
    SingleTrip,
    Srs { r: usize },
    SystematicSeparated { s: usize },
    SeparatedBlocks { block: usize, sep: usize },
}

impl SamplingScheme {
    pub const DEFAULT_BLOCKS: SamplingScheme = SamplingScheme::SeparatedBlocks { block: 100, sep: 50 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingScheme::Srs { r } if r == 0 => Err(Error::invalid("SRS size must be at least 1")),
            SamplingScheme::SeparatedBlocks { block, .. } if block < 2 => {
                Err(Error::invalid("block size must be at least 2"))
            }
            _ => Ok(()),
        }
    }

    /// Smallest number of trips a subject needs for the scheme.
    pub fn min_trips(&self) -> usize {
        match *self {
            SamplingScheme::SingleTrip => 1,
            SamplingScheme::Srs { r } => r,
            SamplingScheme::SystematicSeparated { s } => s + 1,
            SamplingScheme::SeparatedBlocks { block, sep } => block + sep,
        }
    }
}

impl std::fmt::Display for SamplingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingScheme::SingleTrip => write!(f, "single"),
            SamplingScheme::Srs { r } => write!(f, "srs-R{r}"),
            SamplingScheme::SystematicSeparated { s } => write!(f, "systematic-S{s}"),
            SamplingScheme::SeparatedBlocks { block, sep } => write!(f, "sb-B{block}-S{sep}"),
        }
    }
}

/// A subsample expressed as clusters of trip positions in the parent panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsample {
    pub clustering: Clustering,
}

impl Subsample {
    /// Materializes the selected trips as a panel. Subjects without selected
    /// trips are left out.
    pub fn to_panel(&self, panel: &Panel) -> Result<Panel> {
        let mut keep: Vec<Vec<usize>> = vec![Vec::new(); panel.n_subjects()];
        for c in self.clustering.clusters() {
            keep[c.subject].extend_from_slice(&c.trips);
        }
        let subjects = panel
            .subjects()
            .iter()
            .zip(keep)
            .filter(|(_, k)| !k.is_empty())
            .map(|(s, mut k)| {
                k.sort_unstable();
                let mut sub = s.clone();
                sub.trips = k.iter().map(|&j| s.trips[j].clone()).collect();
                sub
            })
            .collect();
        Panel::new(subjects, panel.z_names().to_vec(), panel.x_names().to_vec())
    }
}

/// Blocks of trip positions for a sequence of `k` trips: position `j`
/// belongs to cycle `(j + shift) / (block + sep)` and is taken when its phase
/// `(j + shift) mod (block + sep)` is below `block`. Blocks with fewer than
/// two trips are discarded.
pub fn block_layout(k: usize, block: usize, sep: usize, shift: usize) -> Vec<Vec<usize>> {
    let period = block + sep;
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut current_cycle = usize::MAX;
    for j in 0..k {
        let pos = j + shift;
        if pos % period >= block {
            continue;
        }
        if pos / period != current_cycle {
            current_cycle = pos / period;
            blocks.push(Vec::new());
        }
        blocks.last_mut().expect("block pushed").push(j);
    }
    blocks.retain(|b| b.len() >= 2);
    blocks
}

/// Draws one subsample of `panel` under `scheme`.
pub fn draw_subsample(panel: &Panel, scheme: SamplingScheme, rng: &mut StreamRng) -> Result<Subsample> {
    scheme.validate()?;
    let need = scheme.min_trips();
    if panel.min_trips() < need {
        return Err(Error::precondition(format!(
            "scheme {scheme} needs at least {need} trips per subject, but a subject has {}",
            panel.min_trips()
        )));
    }
    let mut clusters = Vec::new();
    for (i, s) in panel.subjects().iter().enumerate() {
        let k = s.len();
        match scheme {
            SamplingScheme::SingleTrip => clusters.push(Cluster {
                subject: i,
                trips: vec![rng.random_range(0..k)],
            }),
            SamplingScheme::Srs { r } => {
                let mut trips = sample(rng, k, r).into_vec();
                trips.sort_unstable();
                clusters.push(Cluster { subject: i, trips });
            }
            SamplingScheme::SystematicSeparated { s: sep } => {
                let start = rng.random_range(0..=sep);
                clusters.push(Cluster {
                    subject: i,
                    trips: (start..k).step_by(sep + 1).collect(),
                });
            }
            SamplingScheme::SeparatedBlocks { block, sep } => {
                let shift = rng.random_range(0..block + sep);
                let blocks = block_layout(k, block, sep, shift);
                if blocks.is_empty() {
                    log::debug!("subject `{}` contributes no block to this subsample", s.id);
                }
                clusters.extend(blocks.into_iter().map(|trips| Cluster { subject: i, trips }));
            }
        }
    }
    if clusters.is_empty() {
        return Err(Error::precondition("subsample contains no trips"));
    }
    Ok(Subsample {
        clustering: Clustering::new(panel, clusters)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleFit {
    pub theta: Vec<f64>,
    #[serde(with = "matrix_rows::option")]
    pub cov: Option<DMatrix<f64>>,
    pub na: Option<NaReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WcrResult {
    pub scheme: SamplingScheme,
    pub theta_names: Vec<String>,
    pub theta_wcr: Vec<f64>,
    #[serde(with = "matrix_rows")]
    pub cov_wcr: DMatrix<f64>,
    pub l_requested: usize,
    pub l_used: usize,
    pub per_subsample: Vec<SubsampleFit>,
    /// Some diagonal element of `cov_wcr` is negative.
    pub diag_negative: bool,
    /// Every subsample fit was NA.
    pub na_flag: bool,
}

impl WcrResult {
    pub fn se(&self, k: usize) -> Option<f64> {
        let v = self.cov_wcr[(k, k)];
        (v >= 0.0).then(|| v.sqrt())
    }
}

/// Combines subsample estimates: mean of `thetas`, and mean of `covs` minus
/// the sample covariance of `thetas` (divisor `L − 1`, zero when `L = 1`).
pub fn combine(thetas: &[Vec<f64>], covs: &[DMatrix<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let l = thetas.len();
    if l == 0 || covs.len() != l {
        return Err(Error::invalid("need matching, non-empty estimate and covariance lists"));
    }
    let p = thetas[0].len();
    if thetas.iter().any(|t| t.len() != p) || covs.iter().any(|c| c.shape() != (p, p)) {
        return Err(Error::invalid("inconsistent dimensions"));
    }
    // accumulate deviations from the first subsample, so identical inputs
    // combine exactly
    let (t0, c0) = (&thetas[0], &covs[0]);
    let mean: Vec<f64> = (0..p)
        .map(|i| t0[i] + thetas.iter().map(|t| t[i] - t0[i]).sum::<f64>() / l as f64)
        .collect();
    let mut spread = DMatrix::zeros(p, p);
    for c in covs {
        spread += c - c0;
    }
    let mut within = c0 + spread / l as f64;
    if l > 1 {
        let mut between = DMatrix::zeros(p, p);
        for t in thetas {
            for i in 0..p {
                for j in 0..p {
                    between[(i, j)] += (t[i] - mean[i]) * (t[j] - mean[j]);
                }
            }
        }
        within -= between / (l - 1) as f64;
    }
    symmetrize(&mut within);
    Ok((mean, within))
}

/// Runs `l` subsample fits in parallel. Subsample `r` draws from RNG stream
/// `r + 1` of `seed`, so results do not depend on scheduling.
pub fn run_wcr(panel: &Panel, scheme: SamplingScheme, l: usize, config: &FitConfig, seed: u64) -> Result<WcrResult> {
    if l == 0 {
        return Err(Error::invalid("WCR needs at least one repetition"));
    }
    config.validate()?;
    scheme.validate()?;
    let kind = match config.variance_kind {
        VarianceKind::ModelBased => VarianceKind::ModelBased,
        _ => VarianceKind::Robust,
    };
    let fits: Vec<(SubsampleFit, Vec<String>)> = (0..l)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, r as u64 + 1);
            let sub = draw_subsample(panel, scheme, &mut rng)?;
            let fit = fit_gee_clustered(panel, &sub.clustering, config)?;
            let cov = fit.cov_theta(kind);
            let na = fit.na.or(if cov.is_none() { Some(NaReason::NonFinite) } else { None });
            Ok((
                SubsampleFit {
                    theta: fit.theta(),
                    cov,
                    na,
                },
                fit.theta_names(),
            ))
        })
        .collect::<Result<_>>()?;
    let theta_names = fits[0].1.clone();
    let per_subsample: Vec<SubsampleFit> = fits.into_iter().map(|f| f.0).collect();
    let used: Vec<&SubsampleFit> = per_subsample.iter().filter(|f| f.na.is_none()).collect();
    let p = theta_names.len();
    let (theta_wcr, cov_wcr, na_flag) = if used.is_empty() {
        (vec![f64::NAN; p], DMatrix::from_element(p, p, f64::NAN), true)
    } else {
        let thetas: Vec<Vec<f64>> = used.iter().map(|f| f.theta.clone()).collect();
        let covs: Vec<DMatrix<f64>> = used.iter().map(|f| f.cov.clone().expect("non-NA fit has a covariance")).collect();
        let (t, c) = combine(&thetas, &covs)?;
        (t, c, false)
    };
    let diag_negative = !na_flag && cov_wcr.diagonal().iter().any(|&v| v < 0.0);
    Ok(WcrResult {
        scheme,
        theta_names,
        theta_wcr,
        cov_wcr,
        l_requested: l,
        l_used: used.len(),
        per_subsample,
        diag_negative,
        na_flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_layout_examples() {
        assert_eq!(block_layout(10, 3, 2, 0), vec![vec![0, 1, 2], vec![5, 6, 7]]);
        let full = block_layout(1500, 100, 50, 0);
        assert_eq!(full.len(), 10);
        assert!(full.iter().all(|b| b.len() == 100));
        // shift 2 puts the first block's phase at 2: positions 0 only → dropped
        assert_eq!(block_layout(10, 3, 2, 2), vec![vec![3, 4, 5], vec![8, 9]]);
    }

    #[test]
    fn adjacent_blocks_without_separation() {
        assert_eq!(block_layout(6, 2, 0, 1), vec![vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn combine_single_subsample_is_identity() {
        let c = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let (t, v) = combine(&[vec![1.0, 2.0]], std::slice::from_ref(&c)).unwrap();
        assert_eq!(t, vec![1.0, 2.0]);
        assert_eq!(v, c);
    }

    #[test]
    fn combine_constant_fits_returns_common_covariance() {
        let c = DMatrix::from_row_slice(1, 1, &[0.25]);
        let (t, v) = combine(&vec![vec![0.7]; 5], &vec![c.clone(); 5]).unwrap();
        assert_eq!(t, vec![0.7]);
        assert_eq!(v, c);
    }

    #[test]
    fn combine_subtracts_unbiased_sample_variance() {
        let thetas = vec![vec![1.0], vec![2.0], vec![4.0]];
        let covs = vec![DMatrix::from_element(1, 1, 3.0); 3];
        let (t, v) = combine(&thetas, &covs).unwrap();
        let mean = 7.0 / 3.0;
        let s2 = thetas.iter().map(|x| (x[0] - mean) * (x[0] - mean)).sum::<f64>() / 2.0;
        assert!((t[0] - mean).abs() < 1e-15);
        assert!((v[(0, 0)] - (3.0 - s2)).abs() < 1e-12);
    }
}
