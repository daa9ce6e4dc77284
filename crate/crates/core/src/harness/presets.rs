//! Named scenarios mirroring the simulation study: 40 subjects, 1500 trips
//! per subject, unit variance components, zero effects, and serial
//! correlation that is short-lived (`γ = 300`), long-lived (`γ = 50`) or
//! drifts linearly from 300 to 50.
//!
//! `scale` shrinks trips per subject and replicates proportionally; the
//! number of subjects stays fixed.

use super::{Estimator, Scenario, WcrWorking};
use crate::error::{Error, Result};
use crate::gee::VarianceKind;
use crate::simulate::{DesignSpec, GammaSpec, GoupParams};
use crate::subject_level::AlphaMethod;
use crate::wcr::SamplingScheme;
use crate::CovMethod;

const N_SUBJECTS: usize = 40;
const FULL_TRIPS: f64 = 1500.0;
const FULL_REPLICATES: f64 = 1000.0;
const FULL_WCR_REPS: f64 = 500.0;
const SB_REPS: usize = 50;
const SRS_SIZES: [usize; 5] = [1, 5, 25, 100, 500];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Serial {
    Short,
    Long,
    Varying,
}

impl Serial {
    fn gamma(self) -> GammaSpec {
        match self {
            Serial::Short => GammaSpec::Constant(300.0),
            Serial::Long => GammaSpec::Constant(50.0),
            Serial::Varying => GammaSpec::Linear { start: 300.0, end: 50.0 },
        }
    }

    fn name(self) -> &'static str {
        match self {
            Serial::Short => "short",
            Serial::Long => "long",
            Serial::Varying => "varying",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "short" => Some(Serial::Short),
            "long" => Some(Serial::Long),
            "varying" => Some(Serial::Varying),
            _ => None,
        }
    }
}

fn scaled(full: f64, scale: f64) -> usize {
    ((full * scale).round() as usize).max(1)
}

fn base(name: String, mean: f64, serial: Serial, scale: f64, seed: u64, estimators: Vec<Estimator>) -> Scenario {
    let k = scaled(FULL_TRIPS, scale);
    Scenario {
        name,
        design: DesignSpec::driving_study(N_SUBJECTS, k, Some(mean)),
        params: GoupParams::unit_variances(serial.gamma()),
        estimators,
        replicates: scaled(FULL_REPLICATES, scale),
        seed,
    }
}

fn table1() -> Vec<Estimator> {
    vec![
        Estimator::AlphaNoFse {
            variance: VarianceKind::Robust,
        },
        Estimator::AlphaNoFse {
            variance: VarianceKind::ModelBased,
        },
        Estimator::AlphaFse { method: AlphaMethod::Ls },
        Estimator::AlphaFse {
            method: AlphaMethod::Irls,
        },
    ]
}

fn table2_wi() -> Vec<Estimator> {
    let mut v = Vec::new();
    for fse in [false, true] {
        for variance in [VarianceKind::Robust, VarianceKind::ModelBased] {
            v.push(Estimator::BetaWi { fse, variance });
        }
    }
    v
}

fn table2_ecm() -> Vec<Estimator> {
    vec![
        Estimator::BetaEstimatedCov {
            variance: VarianceKind::Robust,
        },
        Estimator::BetaEstimatedCov {
            variance: VarianceKind::ModelBased,
        },
    ]
}

fn table3() -> Vec<Estimator> {
    [CovMethod::FseLs, CovMethod::FseIrls, CovMethod::NoFse]
        .into_iter()
        .map(|method| Estimator::CovParams { method })
        .collect()
}

/// SRS sizes larger than the (scaled) sequence length are left out.
fn table4(working: WcrWorking, k: usize, big_l: usize) -> Vec<Estimator> {
    let mut v = Vec::new();
    let mut block = |fse: bool, variance: VarianceKind, sizes: &[usize]| {
        for &r in sizes.iter().filter(|&&r| r <= k) {
            v.push(Estimator::BetaWcr {
                scheme: SamplingScheme::Srs { r },
                reps: 1,
                working,
                fse,
                variance,
            });
        }
        if 100 <= k {
            v.push(Estimator::BetaWcr {
                scheme: SamplingScheme::Srs { r: 100 },
                reps: big_l,
                working,
                fse,
                variance,
            });
        }
    };
    match working {
        WcrWorking::Independence => {
            block(false, VarianceKind::Robust, &SRS_SIZES);
            block(true, VarianceKind::Robust, &SRS_SIZES[1..]);
        }
        WcrWorking::EstimatedCov => {
            block(true, VarianceKind::Robust, &SRS_SIZES[1..]);
            block(true, VarianceKind::ModelBased, &SRS_SIZES[1..]);
        }
    }
    v
}

fn table5() -> Vec<Estimator> {
    let mut v: Vec<Estimator> = [1, SB_REPS]
        .into_iter()
        .map(|reps| Estimator::BetaWcr {
            scheme: SamplingScheme::DEFAULT_BLOCKS,
            reps,
            working: WcrWorking::Independence,
            fse: true,
            variance: VarianceKind::Robust,
        })
        .collect();
    // full-sample comparators on the same replicates
    v.push(Estimator::BetaWi {
        fse: true,
        variance: VarianceKind::Robust,
    });
    v.push(Estimator::BetaWi {
        fse: false,
        variance: VarianceKind::Robust,
    });
    v
}

fn mean_tag(mean: f64) -> String {
    format!("m{mean}")
}

fn parse_mean(tag: &str) -> Option<f64> {
    tag.strip_prefix('m')?.parse().ok().filter(|m: &f64| [0.1, 1.0, 10.0].contains(m))
}

/// All preset names (aliases excluded).
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for mean in [1.0, 0.1] {
        for serial in [Serial::Short, Serial::Long] {
            names.push(format!("table1-{}-{}", mean_tag(mean), serial.name()));
        }
    }
    for kind in ["wi", "ecm"] {
        for mean in [1.0, 0.1] {
            for serial in [Serial::Short, Serial::Long] {
                names.push(format!("table2-{kind}-{}-{}", mean_tag(mean), serial.name()));
            }
        }
    }
    for mean in [1.0, 0.1] {
        names.push(format!("table2-varying-{}", mean_tag(mean)));
    }
    for mean in [10.0, 1.0, 0.1] {
        for serial in [Serial::Short, Serial::Long] {
            names.push(format!("table3-{}-{}", mean_tag(mean), serial.name()));
        }
    }
    for kind in ["wi", "ecm"] {
        for serial in [Serial::Short, Serial::Long] {
            names.push(format!("table4-{kind}-{}", serial.name()));
        }
    }
    for serial in [Serial::Short, Serial::Long, Serial::Varying] {
        names.push(format!("table5-{}", serial.name()));
    }
    names
}

fn resolve_alias(name: &str) -> &str {
    match name {
        "table1" => "table1-m1-short",
        "table2" | "table2-wi" => "table2-wi-m1-short",
        "table2-ecm" => "table2-ecm-m1-short",
        "table3" => "table3-m10-short",
        "table4" | "table4-wi" => "table4-wi-short",
        "table4-ecm" => "table4-ecm-short",
        "table5" => "table5-long",
        other => other,
    }
}

/// Builds a named preset at the given scale.
pub fn preset(name: &str, scale: f64, seed: u64) -> Result<Scenario> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("scale must be positive"));
    }
    let canonical = resolve_alias(name);
    let unknown = || Error::invalid(format!("unknown preset `{name}`; known presets: {}", preset_names().join(", ")));
    let parts: Vec<&str> = canonical.split('-').collect();
    let full_name = canonical.to_string();
    let k = scaled(FULL_TRIPS, scale);
    let scenario = match parts.as_slice() {
        ["table1", m, s] => {
            let (mean, serial) = (parse_mean(m).ok_or_else(unknown)?, Serial::parse(s).ok_or_else(unknown)?);
            if mean == 10.0 || serial == Serial::Varying {
                return Err(unknown());
            }
            base(full_name, mean, serial, scale, seed, table1())
        }
        ["table2", "varying", m] => {
            let mean = parse_mean(m).filter(|&m| m != 10.0).ok_or_else(unknown)?;
            base(full_name, mean, Serial::Varying, scale, seed, table2_ecm())
        }
        ["table2", kind @ ("wi" | "ecm"), m, s] => {
            let mean = parse_mean(m).filter(|&m| m != 10.0).ok_or_else(unknown)?;
            let serial = Serial::parse(s).filter(|&s| s != Serial::Varying).ok_or_else(unknown)?;
            let est = if *kind == "wi" { table2_wi() } else { table2_ecm() };
            base(full_name, mean, serial, scale, seed, est)
        }
        ["table3", m, s] => {
            let mean = parse_mean(m).ok_or_else(unknown)?;
            let serial = Serial::parse(s).filter(|&s| s != Serial::Varying).ok_or_else(unknown)?;
            base(full_name, mean, serial, scale, seed, table3())
        }
        ["table4", kind @ ("wi" | "ecm"), s] => {
            let serial = Serial::parse(s).filter(|&s| s != Serial::Varying).ok_or_else(unknown)?;
            let working = if *kind == "wi" {
                WcrWorking::Independence
            } else {
                WcrWorking::EstimatedCov
            };
            let big_l = scaled(FULL_WCR_REPS, scale);
            base(full_name, 0.1, serial, scale, seed, table4(working, k, big_l))
        }
        ["table5", s] => {
            let serial = Serial::parse(s).ok_or_else(unknown)?;
            base(full_name, 0.1, serial, scale, seed, table5())
        }
        _ => return Err(unknown()),
    };
    Ok(scenario)
}

/// Every preset at the given scale.
pub fn paper_scenarios(scale: f64, seed: u64) -> Result<Vec<Scenario>> {
    preset_names().iter().map(|n| preset(n, scale, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_builds_and_validates() {
        for s in paper_scenarios(0.2, 1).unwrap() {
            s.validate().unwrap();
        }
        assert_eq!(preset_names().len(), 4 + 8 + 2 + 6 + 4 + 3);
    }

    #[test]
    fn scale_rule() {
        let full = preset("table1", 1.0, 0).unwrap();
        assert_eq!(full.design.n_subjects, 40);
        assert_eq!(full.design.trips_per_subject, 1500);
        assert_eq!(full.replicates, 1000);
        let desk = preset("table1", 0.2, 0).unwrap();
        assert_eq!(desk.design.n_subjects, 40);
        assert_eq!(desk.design.trips_per_subject, 300);
        assert_eq!(desk.replicates, 200);
    }

    #[test]
    fn table5_long_setup() {
        let s = preset("table5-long", 0.2, 0).unwrap();
        assert_eq!(s.design.target_mean_count, Some(0.1));
        assert_eq!(s.params.gamma, GammaSpec::Constant(50.0));
        assert!(s.estimators.contains(&Estimator::BetaWcr {
            scheme: SamplingScheme::SeparatedBlocks { block: 100, sep: 50 },
            reps: 50,
            working: WcrWorking::Independence,
            fse: true,
            variance: VarianceKind::Robust,
        }));
    }

    #[test]
    fn table4_drops_oversized_srs_and_scales_l() {
        let s = preset("table4-wi-short", 0.2, 0).unwrap();
        let mut saw_big_l = false;
        for e in &s.estimators {
            if let Estimator::BetaWcr {
                scheme: SamplingScheme::Srs { r },
                reps,
                ..
            } = e
            {
                assert!(*r <= 300);
                saw_big_l |= *reps == 100;
            }
        }
        assert!(saw_big_l);
    }

    #[test]
    fn unknown_presets_rejected() {
        assert!(preset("table9", 1.0, 0).is_err());
        assert!(preset("table1-m10-short", 1.0, 0).is_err());
        assert!(preset("table1", 0.0, 0).is_err());
    }
}
