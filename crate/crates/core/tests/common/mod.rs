#![allow(dead_code)]

use longcount::{Panel, Subject, TripRecord};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Small random panel: one normal subject covariate, two trip covariates
/// (trip time and a normal draw), log-normal offsets and Poisson counts with
/// subject-level heterogeneity. Every subject has a positive total count.
pub fn random_small_panel<R: Rng>(rng: &mut R, n: usize, k_max: usize, level: f64) -> Panel {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let subjects: Vec<Subject> = (0..n)
            .map(|i| {
                let k = rng.random_range(4..=k_max);
                let z: f64 = normal.sample(rng);
                let b = 0.5 * normal.sample(rng);
                let mut times: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                times.sort_by(f64::total_cmp);
                let trips = times
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| {
                        let offset = (0.3 * normal.sample(rng)).exp();
                        let x2: f64 = normal.sample(rng);
                        let eta = level + 0.4 * z + 0.3 * t - 0.2 * x2 + b;
                        let count = Poisson::new(offset * eta.exp()).unwrap().sample(rng) as u64;
                        TripRecord {
                            trip_index: j as u32 + 1,
                            time: t,
                            offset,
                            covariates: vec![t, x2],
                            count,
                        }
                    })
                    .collect();
                Subject {
                    id: format!("s{i}"),
                    covariates: vec![z],
                    trips,
                }
            })
            .collect();
        if subjects.iter().all(|s| s.total_count() > 0) {
            return Panel::new(subjects, vec!["z".into()], vec!["t".into(), "x2".into()]).unwrap();
        }
    }
}

/// Dense Newton solve of the working-independence quasi-Poisson score
/// `Σ_ij d_ij (Y_ij − m_ij exp(d_ij'θ)) = 0`, built from an explicit design
/// matrix with one row per trip.
///
/// Without FSE the design row is `(1, Z_i, X_ij)`; with FSE it is
/// `(e_i, X_ij)` where `e_i` is the subject indicator.
pub fn dense_newton(panel: &Panel, use_fse: bool) -> Vec<f64> {
    let n = panel.n_subjects();
    let (p_z, p_x) = (panel.p_z(), panel.p_x());
    let p = if use_fse { n + p_x } else { 1 + p_z + p_x };
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut m = Vec::new();
    for (i, s) in panel.subjects().iter().enumerate() {
        for t in &s.trips {
            let mut d = vec![0.0; p];
            if use_fse {
                d[i] = 1.0;
                d[n..].copy_from_slice(&t.covariates);
            } else {
                d[0] = 1.0;
                d[1..1 + p_z].copy_from_slice(&s.covariates);
                d[1 + p_z..].copy_from_slice(&t.covariates);
            }
            rows.push(d);
            y.push(t.count as f64);
            m.push(t.offset);
        }
    }
    let d = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
    let y = DVector::from_vec(y);
    let m = DVector::from_vec(m);
    // start from the log of the pooled rate
    let mut theta = DVector::zeros(p);
    let rate = (y.sum() / m.sum()).ln();
    if use_fse {
        for i in 0..n {
            theta[i] = rate;
        }
    } else {
        theta[0] = rate;
    }
    for _ in 0..200 {
        let eta = &d * &theta;
        let mu = DVector::from_fn(eta.len(), |r, _| m[r] * eta[r].exp());
        let score = d.transpose() * (&y - &mu);
        let mut info = DMatrix::zeros(p, p);
        for r in 0..d.nrows() {
            let row = d.row(r);
            info += mu[r] * row.transpose() * row;
        }
        let step = info.lu().solve(&score).expect("nonsingular information");
        theta += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    theta.iter().copied().collect()
}
