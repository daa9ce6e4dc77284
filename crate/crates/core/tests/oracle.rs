mod common;

use common::{dense_newton, random_small_panel};
use longcount::gee::fit_gee;
use longcount::rng::seeded;
use longcount::FitConfig;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn independence_fit_without_fse_matches_dense_newton() {
    let mut rng = seeded(101);
    for _ in 0..10 {
        let panel = random_small_panel(&mut rng, 5, 20, 0.5);
        let fit = fit_gee(&panel, &FitConfig::independence(false)).unwrap();
        assert!(fit.converged && !fit.is_na());
        let oracle = dense_newton(&panel, false);
        assert!(max_abs_diff(&fit.coefficients, &oracle) < 1e-8, "{:?} vs {:?}", fit.coefficients, oracle);
    }
}

#[test]
fn independence_fit_with_fse_matches_dense_newton() {
    let mut rng = seeded(202);
    for _ in 0..10 {
        let panel = random_small_panel(&mut rng, 5, 20, 0.5);
        let fit = fit_gee(&panel, &FitConfig::independence(true)).unwrap();
        assert!(fit.converged && !fit.is_na());
        assert!(fit.dropped_subjects.is_empty());
        let oracle = dense_newton(&panel, true);
        assert!(max_abs_diff(&fit.coefficients, &oracle) < 1e-8, "{:?} vs {:?}", fit.coefficients, oracle);
    }
}

#[test]
fn low_count_panels_still_match() {
    let mut rng = seeded(303);
    for _ in 0..5 {
        let panel = random_small_panel(&mut rng, 4, 12, -1.0);
        for fse in [false, true] {
            let fit = fit_gee(&panel, &FitConfig::independence(fse)).unwrap();
            let oracle = dense_newton(&panel, fse);
            assert!(max_abs_diff(&fit.coefficients, &oracle) < 1e-8);
        }
    }
}
