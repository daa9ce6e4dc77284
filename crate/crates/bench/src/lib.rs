//! Fixtures shared by the benchmarks.

use longcount::rng::seeded;
use longcount::simulate::{simulate_panel, DesignSpec, GammaSpec, GoupParams};
use longcount::Panel;

/// A driving-study panel with unit variance components and `γ = 50`.
pub fn fixture_panel(n_subjects: usize, trips: usize, mean_count: f64, seed: u64) -> Panel {
    let design = DesignSpec::driving_study(n_subjects, trips, Some(mean_count));
    let params = GoupParams::unit_variances(GammaSpec::Constant(50.0));
    simulate_panel(&params, &design, &mut seeded(seed)).expect("fixture design is valid")
}
