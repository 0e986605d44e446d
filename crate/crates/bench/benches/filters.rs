//! Criterion benchmarks for the hot paths: chart construction, conjugate
//! proposals, resampling, OU ladders and guided paths, and one full filter
//! run at experiment scale.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use std::hint::black_box;

use mpf_core::bridge::{
    build_guided_path_with, fhn_sde, linearize, sample_increments, BridgeGrid, FhnParams, OuLadder,
};
use mpf_core::engine::{systematic_ancestors, PfConfig};
use mpf_core::experiments::{build_model, run_filter, FilterId, ModelId};
use mpf_core::geometry::ConstraintGeometry;
use mpf_core::linalg::standard_normal_vector;
use mpf_core::proposals::low_noise_optimal;
use mpf_core::ssm::{lgm_transition, lorenz96_map, ObsMatrix, ObservationSpec};
use mpf_core::streams::{stream_rng, StreamRole};

fn bench_geometry(c: &mut Criterion) {
    let mut rng = stream_rng(1, StreamRole::Simulate, 0, 0);
    let a = DMatrix::from_fn(2, 10, |_, _| {
        rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
    });
    let y = standard_normal_vector(2, &mut rng);
    c.bench_function("extended_chart_2x10", |b| {
        let geom = ConstraintGeometry::new(a.clone()).unwrap();
        b.iter(|| black_box(geom.extended_chart(black_box(&y), 1e-6).unwrap()))
    });
}

fn bench_proposal(c: &mut Criterion) {
    let d = 10;
    let transition =
        lgm_transition(DMatrix::identity(d, d) * 0.9, DMatrix::identity(d, d)).unwrap();
    let a = DMatrix::from_element(1, d, 0.1);
    let obs =
        ObservationSpec::new(ObsMatrix::Constant(a.clone()), DMatrix::identity(1, 1), 1e-4)
            .unwrap();
    let geom = ConstraintGeometry::new(a).unwrap();
    let y = DVector::from_element(1, 0.3);
    let chart = geom.extended_chart(&y, 1e-4).unwrap();
    let x_prev = DVector::from_element(d, 0.2);
    c.bench_function("low_noise_optimal_d10", |b| {
        b.iter(|| black_box(low_noise_optimal(black_box(&x_prev), &chart, &transition, &obs)))
    });
}

fn bench_resample(c: &mut Criterion) {
    let n = 100_000;
    let mut rng = stream_rng(2, StreamRole::Resample, 0, 0);
    let raw: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    c.bench_function("systematic_resample_100k", |b| {
        b.iter(|| black_box(systematic_ancestors(black_box(&w), &mut rng)))
    });
}

fn bench_bridge(c: &mut Criterion) {
    let sde = fhn_sde(FhnParams { alpha: 0.1, gamma: 1.0, beta: 0.2 }, 0.1);
    let x0 = DVector::from_row_slice(&[0.5, 0.5]);
    let aux = linearize(&sde, &x0, 0.1, 20).unwrap();
    let grid = BridgeGrid::uniform(20, 0.0, 0.1);
    let mut rng = stream_rng(3, StreamRole::Brownian, 0, 0);
    let incr = sample_increments(&grid, 2, &mut rng);
    let x_end = DVector::from_row_slice(&[0.6, 0.45]);
    c.bench_function("ou_ladder_20_steps", |b| {
        b.iter(|| black_box(OuLadder::new(black_box(&aux), &grid).unwrap()))
    });
    let ladder = OuLadder::new(&aux, &grid).unwrap();
    c.bench_function("guided_path_20_steps", |b| {
        b.iter(|| {
            black_box(
                build_guided_path_with(&sde, &ladder, black_box(&x0), &x_end, &incr).unwrap(),
            )
        })
    });
}

fn bench_lorenz_step(c: &mut Criterion) {
    let x = DVector::from_element(8, 1.0);
    c.bench_function("lorenz96_map_d8", |b| {
        b.iter(|| black_box(lorenz96_map(black_box(&x), 8.0, 1e-2)))
    });
}

fn bench_full_filter(c: &mut Criterion) {
    let model = build_model(ModelId::Lgm, 1e-4).unwrap();
    let traj = model.simulate(20, 1);
    c.bench_function("lgm_low_noise_n1000_20_steps", |b| {
        b.iter(|| {
            let cfg = PfConfig::new(1000, 20, 2);
            black_box(
                run_filter(
                    &model,
                    &traj.observations,
                    FilterId::LowNoise,
                    &cfg,
                    0,
                    &[],
                    &[],
                    false,
                )
                .unwrap(),
            )
        })
    });
}

criterion_group!(
    benches,
    bench_geometry,
    bench_proposal,
    bench_resample,
    bench_bridge,
    bench_lorenz_step,
    bench_full_filter
);
criterion_main!(benches);
