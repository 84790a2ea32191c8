//! Criterion benchmarks for the hot paths: one SGD step, k-DPP sampling,
//! Monte-Carlo error on a shared test set and the closed-form error.

use std::hint::black_box;

use criterion::{BatchSize, BenchmarkId, Criterion, Throughput};
use prunelab::analytics::{ge_on_test_set, TestSet};
use prunelab::dpp::{analytic_kernel, sample_kdpp};
use prunelab::netcore::{draw_sample, NoiseConfig};
use prunelab::rng::stream;
use prunelab::trainer::sgd_step;
use prunelab::{ge_closed_form, order_params, TwoLayerNet};

/// Student and teacher at the default sizes, with the student nudged toward
/// the teacher so Q has block structure.
pub fn fixture(n: usize, m: usize, k: usize) -> (TwoLayerNet, TwoLayerNet) {
    let mut rng = stream(7);
    let teacher = TwoLayerNet::teacher(m, n, 4.0, &mut rng);
    let noise = TwoLayerNet::random(k, n, &mut rng);
    let w = ndarray::Array2::from_shape_fn((k, n), |(i, j)| teacher.w()[[i % m, j]] + 0.3 * noise.w()[[i, j]]);
    let v = ndarray::Array1::from_elem(k, 4.0 * m as f64 / k as f64);
    (TwoLayerNet::new(w, v).expect("consistent shapes"), teacher)
}

pub fn sgd(c: &mut Criterion) {
    let mut group = c.benchmark_group("sgd_step");
    for n in [100, 500, 2000] {
        let (student, teacher) = fixture(n, 2, 6);
        let mut rng = stream(1);
        group.throughput(Throughput::Elements(1));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter_batched(
                || draw_sample(&teacher, NoiseConfig::noiseless(), &mut rng),
                |s| black_box(sgd_step(&student, &s, 0.5).expect("valid step")),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

pub fn kdpp(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_kdpp");
    for (m, k) in [(2, 6), (4, 24), (10, 100)] {
        let (student, teacher) = fixture(200, m, k);
        let kernel = analytic_kernel(&order_params(&student, &teacher).expect("same N").q).expect("psd");
        let mut rng = stream(2);
        group.bench_function(BenchmarkId::new("K", k), |b| {
            b.iter(|| black_box(sample_kdpp(&kernel, m, &mut rng).expect("feasible")))
        });
    }
    group.finish();
}

pub fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("ge_monte_carlo");
    group.sample_size(10);
    let (student, teacher) = fixture(500, 2, 6);
    for samples in [10_000, 80_000] {
        let test = TestSet::new(3, samples, 500);
        group.throughput(Throughput::Elements(samples as u64));
        group.bench_with_input(BenchmarkId::from_parameter(samples), &test, |b, test| {
            b.iter(|| black_box(ge_on_test_set(std::slice::from_ref(&student), &[1.0], &teacher, test).expect("same N")))
        });
    }
    group.finish();
}

pub fn closed_form(c: &mut Criterion) {
    let mut group = c.benchmark_group("ge_closed_form");
    for (m, k) in [(2, 6), (10, 100)] {
        let (student, teacher) = fixture(500, m, k);
        let op = order_params(&student, &teacher).expect("same N");
        group.bench_function(BenchmarkId::new("K", k), |b| {
            b.iter(|| black_box(ge_closed_form(&op, student.v().view(), teacher.v().view()).expect("in domain")))
        });
    }
    group.finish();
}

pub fn benchmarks(c: &mut Criterion) {
    sgd(c);
    kdpp(c);
    monte_carlo(c);
    closed_form(c);
}
