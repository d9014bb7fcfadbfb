use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stripe_impurity::bloch::{assemble_bloch, lambda2_from_jet};
use stripe_impurity::fredholmlab::{discrete_weighted_operator, kernel_cokernel_dims, OperatorKind, WeightSpec};
use stripe_impurity::par;
use stripe_impurity::response::{response_coefficients, ImpuritySpec};
use stripe_impurity::stripes::{partial_k, solve_stripe};

fn backend() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential-build"
    }
}

fn response_sweep(c: &mut Criterion) {
    let s = solve_stripe(0.1, 1.0, 32, 1e-12).unwrap();
    let d = partial_k(&s).unwrap();
    let l2 = lambda2_from_jet(&s, &d).lambda2;
    let g = ImpuritySpec::gaussian(2.0, 1.0, 0.5);
    let phases: Vec<f64> = (0..32).map(|j| j as f64 * std::f64::consts::TAU / 32.0).collect();
    let one = |&p: &f64| response_coefficients(&s, &d, l2, &g, p).unwrap();

    let mut group = c.benchmark_group("response_sweep_32");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new(backend(), 32), |b| b.iter(|| par::map(&phases, one)));
    group.bench_function(BenchmarkId::new("single", 32), |b| b.iter(|| par::single::map(&phases, one)));
    group.finish();
}

fn bloch_band(c: &mut Criterion) {
    let s = solve_stripe(0.1, 1.0, 32, 1e-12).unwrap();
    let sigma: Vec<f64> = (0..64).map(|j| -0.5 + j as f64 / 64.0).collect();
    let one = |&q: &f64| assemble_bloch(&s, q).symmetric_eigenvalues().max();

    let mut group = c.benchmark_group("bloch_band_64");
    group.bench_function(BenchmarkId::new(backend(), 64), |b| b.iter(|| par::map(&sigma, one)));
    group.bench_function(BenchmarkId::new("single", 64), |b| b.iter(|| par::single::map(&sigma, one)));
    group.finish();
}

fn fredholm_scan(c: &mut Criterion) {
    let gammas = [0.0, 1.0, 2.0, 3.0];
    let one = |&g: &f64| {
        let op = discrete_weighted_operator(OperatorKind::Difference { ell: 2, i: 1 }, 128, WeightSpec::isotropic(g), false)
            .unwrap();
        kernel_cokernel_dims(&op, 1e4).unwrap().index()
    };

    let mut group = c.benchmark_group("fredholm_scan_4");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new(backend(), 4), |b| b.iter(|| par::map(&gammas, one)));
    group.bench_function(BenchmarkId::new("single", 4), |b| b.iter(|| par::single::map(&gammas, one)));
    group.finish();
}

criterion_group!(benches, response_sweep, bloch_band, fredholm_scan);
criterion_main!(benches);
