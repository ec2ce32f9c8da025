//! Criterion benchmarks for the three hot paths: smooth-max evaluation,
//! the certified distance solve (cold and warm-started), its sensitivity
//! solve, and the input-filter QP.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safeset::cbf::solve_filter_qp;
use safeset::corpus::{self, DisjointPair};
use safeset::lse::lse_eps_plus;
use safeset::{
    distance_gradient, solve_distance, DistanceProblem, SafetyConstraintRow, SmoothMaxParams,
    SolveOptions,
};

fn bench_smooth_max(c: &mut Criterion) {
    let params = SmoothMaxParams::new(100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("smooth_max");
    for q in [4usize, 8, 16] {
        let xs: Vec<f64> = (0..q).map(|_| rng.gen_range(-0.05..0.05)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(q), &xs, |b, xs| {
            b.iter(|| lse_eps_plus(black_box(xs), params).unwrap())
        });
    }
    group.finish();
}

fn sample_pair(seed: u64) -> DisjointPair {
    let smoothing = SmoothMaxParams::new(400.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus::random_disjoint_pair(&mut rng, smoothing)
}

fn bench_distance(c: &mut Criterion) {
    let pair = sample_pair(2);
    let problem = DistanceProblem::new(
        &pair.ego,
        &pair.obstacle,
        pair.lambda_e.clone(),
        pair.lambda_j.clone(),
    )
    .unwrap();
    let cold = SolveOptions::default();
    let reference = solve_distance(&problem, &cold).unwrap();
    let warm = SolveOptions {
        init: Some((reference.z_e.clone(), reference.z_j.clone())),
        ..SolveOptions::default()
    };

    let mut group = c.benchmark_group("distance");
    group.bench_function("solve_cold", |b| {
        b.iter(|| solve_distance(black_box(&problem), &cold).unwrap())
    });
    group.bench_function("solve_warm", |b| {
        b.iter(|| solve_distance(black_box(&problem), &warm).unwrap())
    });
    group.bench_function("gradient", |b| {
        b.iter(|| distance_gradient(black_box(&problem), black_box(&reference)).unwrap())
    });
    group.finish();
}

fn random_row(rng: &mut ChaCha8Rng, obstacle_id: usize) -> SafetyConstraintRow {
    loop {
        let coeff = DVector::from_vec(vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        if coeff.norm() >= 0.3 {
            return SafetyConstraintRow {
                coeff,
                offset: rng.gen_range(-10.0..10.0),
                obstacle_id,
                h_value: 0.0,
            };
        }
    }
}

fn bench_filter_qp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u_nom = DVector::from_vec(vec![1.5, -0.75]);
    let mut group = c.benchmark_group("filter_qp");
    for n_rows in [1usize, 3, 6] {
        let rows: Vec<SafetyConstraintRow> =
            (0..n_rows).map(|k| random_row(&mut rng, k)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n_rows), &rows, |b, rows| {
            b.iter(|| solve_filter_qp(black_box(&u_nom), black_box(rows)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_smooth_max, bench_distance, bench_filter_qp);
criterion_main!(benches);
