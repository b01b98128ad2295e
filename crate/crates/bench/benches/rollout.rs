use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mlcl_core::baselines::{ekf_run, mle_window, MleOptions};
use mlcl_core::mlcl::{rollout_batch, Model, RolloutMode};
use mlcl_core::{Episode, MlclDims, MlclModel, MlclParams, NoiseConfig, Point2};

fn params() -> MlclParams {
    let mut r = mlcl_core::rng::from_seed(1);
    MlclParams::init(MlclDims::DESK, 1000.0, 500.0, &mut r).with_origin(Point2::new(375.0, 375.0))
}

fn rollouts(c: &mut Criterion) {
    let eps = mlcl_bench::episodes(32, 6, 20);
    let refs: Vec<&Episode> = eps.iter().collect();
    let p = params();
    c.bench_function("forward batch 32", |b| {
        b.iter(|| rollout_batch(&p, &refs, false, RolloutMode::Sparse).unwrap().loss())
    });
    c.bench_function("forward+backward batch 32", |b| {
        let m = MlclModel { params: p.clone(), disable_comm: false };
        b.iter(|| m.loss_and_grads(&refs).unwrap())
    });
    c.bench_function("forward single episode", |b| {
        b.iter(|| rollout_batch(&p, &refs[..1], false, RolloutMode::Sparse).unwrap().loss())
    });
}

fn baselines(c: &mut Criterion) {
    let eps = mlcl_bench::episodes(4, 6, 20);
    let noise = NoiseConfig::default();
    c.bench_function("ekf episode", |b| b.iter(|| ekf_run(&eps[0], &noise, 1.0).unwrap()));
    c.bench_function("mle window", |b| {
        b.iter_batched(MleOptions::default, |o| mle_window(&eps[1], &noise, &o).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = rollouts, baselines
}
criterion_main!(benches);
