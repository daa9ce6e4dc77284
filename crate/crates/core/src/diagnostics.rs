//! Serial-correlation diagnostic: products of standardized residuals of
//! consecutive trips, averaged within equal-count bins of the gap time.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binning::{equal_count_ranges, sorted_median};
use crate::cov_estimation::CovParamEstimate;
use crate::data::{fmt_real, Panel};
use crate::error::{Error, Result};

pub const DEFAULT_DIAGNOSTIC_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBin {
    pub median_gap: f64,
    pub mean_product: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedCorrelation {
    pub bins: Vec<GapBin>,
}

/// Working variances `μ + μ²(exp(s) − 1)`, where `s` is `σ²_c + σ²_e`
/// (plus `σ²_b` without FSE); `cov = None` gives the Poisson variance `μ`.
pub fn working_variances(
    fitted: &[Option<Vec<f64>>],
    cov: Option<&CovParamEstimate>,
    use_fse: bool,
) -> Vec<Option<Vec<f64>>> {
    let excess = cov.map_or(0.0, |c| {
        let b = if use_fse { 0.0 } else { c.sigma2_b.unwrap_or(0.0) };
        (b + c.sigma2_c + c.sigma2_e).exp_m1()
    });
    fitted
        .iter()
        .map(|mu| mu.as_ref().map(|mu| mu.iter().map(|&m| m + m * m * excess).collect()))
        .collect()
}

/// Bins consecutive-pair products of `(Y − μ̂)/√v̂` by gap. Subjects whose
/// fitted means are `None` are skipped. When there are fewer pairs than
/// `n_bins`, each pair forms its own bin.
pub fn serial_diagnostic(
    panel: &Panel,
    fitted: &[Option<Vec<f64>>],
    variances: &[Option<Vec<f64>>],
    n_bins: usize,
) -> Result<BinnedCorrelation> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be positive"));
    }
    if fitted.len() != panel.n_subjects() || variances.len() != panel.n_subjects() {
        return Err(Error::invalid("fitted means or variances not aligned with the panel"));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for ((s, mu), var) in panel.subjects().iter().zip(fitted).zip(variances) {
        let (Some(mu), Some(var)) = (mu, var) else { continue };
        if mu.len() != s.len() || var.len() != s.len() {
            return Err(Error::invalid(format!("fitted values for `{}` have the wrong length", s.id)));
        }
        if var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::precondition("working variances must be positive"));
        }
        let z: Vec<f64> = s
            .trips
            .iter()
            .zip(mu.iter().zip(var))
            .map(|(t, (&m, &v))| (t.count as f64 - m) / v.sqrt())
            .collect();
        for j in 1..s.len() {
            pairs.push((s.trips[j].time - s.trips[j - 1].time, z[j] * z[j - 1]));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let gaps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let bins = equal_count_ranges(pairs.len(), n_bins)
        .into_iter()
        .map(|r| GapBin {
            median_gap: sorted_median(&gaps[r.clone()]),
            mean_product: pairs[r.clone()].iter().map(|p| p.1).sum::<f64>() / r.len() as f64,
            n_pairs: r.len(),
        })
        .collect();
    Ok(BinnedCorrelation { bins })
}

impl BinnedCorrelation {
    pub fn total_pairs(&self) -> usize {
        self.bins.iter().map(|b| b.n_pairs).sum()
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["median_gap", "mean_product", "n_pairs"])?;
        for b in &self.bins {
            out.write_record([fmt_real(b.median_gap), fmt_real(b.mean_product), b.n_pairs.to_string()])?;
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
    use crate::data::{Subject, TripRecord};

    fn panel() -> Panel {
        let counts = [0u64, 3, 1, 4, 0, 2, 5];
        let trips = counts
            .iter()
            .enumerate()
            .map(|(j, &c)| TripRecord {
                trip_index: j as u32 + 1,
                time: (j * j) as f64 / 100.0,
                offset: 1.0,
                covariates: vec![],
                count: c,
            })
            .collect();
        Panel::new(
            vec![Subject {
                id: "A".into(),
                covariates: vec![],
                trips,
            }],
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn single_bin_is_overall_mean() {
        let p = panel();
        let mu = vec![Some(vec![2.0; 7])];
        let out = serial_diagnostic(&p, &mu, &mu, 1).unwrap();
        assert_eq!(out.bins.len(), 1);
        let z: Vec<f64> = [0.0, 3.0, 1.0, 4.0, 0.0, 2.0, 5.0].iter().map(|y| (y - 2.0) / 2f64.sqrt()).collect();
        let mean = (1..7).map(|j| z[j] * z[j - 1]).sum::<f64>() / 6.0;
        assert!((out.bins[0].mean_product - mean).abs() < 1e-12);
        assert_eq!(out.total_pairs(), 6);
    }

    #[test]
    fn more_bins_than_pairs() {
        let p = panel();
        let mu = vec![Some(vec![2.0; 7])];
        let out = serial_diagnostic(&p, &mu, &mu, 100).unwrap();
        assert_eq!(out.bins.len(), 6);
        assert!(out.bins.windows(2).all(|w| w[0].median_gap <= w[1].median_gap));
    }

    #[test]
    fn csv_header() {
        let p = panel();
        let mu = vec![Some(vec![2.0; 7])];
        let mut buf = Vec::new();
        serial_diagnostic(&p, &mu, &mu, 2).unwrap().write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("median_gap,mean_product,n_pairs\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
