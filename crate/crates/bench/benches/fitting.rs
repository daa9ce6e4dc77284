use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use longcount::cov_estimation::{fit_covariance, CovMethod, DEFAULT_BINS};
use longcount::gee::fit_gee;
use longcount::wcr::run_wcr;
use longcount::{FitConfig, SamplingScheme, VarianceKind};
use longcount_bench::fixture_panel;
use std::hint::black_box;

fn independence_fits(c: &mut Criterion) {
    let mut group = c.benchmark_group("independence_fit");
    for trips in [300, 1500] {
        let panel = fixture_panel(40, trips, 1.0, 1);
        for fse in [false, true] {
            let config = FitConfig::independence(fse).with_variance(VarianceKind::Both);
            let id = BenchmarkId::new(if fse { "fse" } else { "marginal" }, trips);
            group.bench_with_input(id, &panel, |b, p| b.iter(|| fit_gee(black_box(p), &config).unwrap()));
        }
    }
    group.finish();
}

fn goup_one_step(c: &mut Criterion) {
    let panel = fixture_panel(40, 300, 1.0, 2);
    let cov = fit_covariance(&panel, CovMethod::FseLs, DEFAULT_BINS).unwrap();
    let config = FitConfig::one_step(true, cov);
    c.bench_function("goup_one_step/300", |b| b.iter(|| fit_gee(black_box(&panel), &config).unwrap()));
}

fn covariance_estimation(c: &mut Criterion) {
    let panel = fixture_panel(40, 300, 10.0, 3);
    let mut group = c.benchmark_group("covariance_estimation");
    for method in [CovMethod::FseLs, CovMethod::FseIrls, CovMethod::NoFse] {
        group.bench_function(format!("{method:?}"), |b| {
            b.iter(|| fit_covariance(black_box(&panel), method, DEFAULT_BINS).unwrap())
        });
    }
    group.finish();
}

fn separated_blocks(c: &mut Criterion) {
    let panel = fixture_panel(40, 1500, 0.1, 4);
    let config = FitConfig::independence(true).with_variance(VarianceKind::Robust);
    let mut group = c.benchmark_group("wcr");
    group.sample_size(10);
    group.bench_function("sb_L10/1500", |b| {
        b.iter(|| run_wcr(black_box(&panel), SamplingScheme::DEFAULT_BLOCKS, 10, &config, 5).unwrap())
    });
    group.finish();
}

criterion_group!(benches, independence_fits, goup_one_step, covariance_estimation, separated_blocks);
criterion_main!(benches);
