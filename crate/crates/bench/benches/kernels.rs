use std::hint::black_box;

use atpinn_core::network::layer_sizes;
use atpinn_core::oracle::burgers_reference;
use atpinn_core::pde::{burgers_problem, poisson_problem};
use atpinn_core::sampling::{lhs, pinn_pgd, sais_step, seeded_rng, ResidualObjective};
use atpinn_core::training::loss_and_grad;
use atpinn_core::{AttackConfig, MlpParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn training_epoch(c: &mut Criterion) {
    let p = poisson_problem();
    let params = MlpParams::init(&layer_sizes(2, 8, 20), 0).unwrap();
    let boundary = p.boundary_points(200, &mut seeded_rng(1)).unwrap();
    let mut group = c.benchmark_group("loss_and_grad");
    for n in [100, 500, 1000] {
        let x = lhs(n, p.domain(), 2).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| loss_and_grad(&params, &p, black_box(x.points()), Some(&boundary), 1.0).unwrap())
        });
    }
    group.finish();
}

fn residual_grid(c: &mut Criterion) {
    let p = burgers_problem();
    let params = MlpParams::init(&layer_sizes(2, 8, 20), 0).unwrap();
    let x = lhs(4096, p.domain(), 3).unwrap();
    c.bench_function("residual_values/4096", |b| {
        b.iter(|| p.residual_values(&params, black_box(x.points())).unwrap())
    });
}

fn attack(c: &mut Criterion) {
    let p = poisson_problem();
    let params = MlpParams::init(&layer_sizes(2, 8, 20), 0).unwrap();
    let x = lhs(500, p.domain(), 4).unwrap();
    let cfg = AttackConfig { epsilon: 0.1, eta: 0.02, steps: 20, revisit: 1.0, random_init: true };
    c.bench_function("pinn_pgd/500x20", |b| {
        b.iter(|| {
            let mut obj = ResidualObjective { problem: &p, params: &params };
            pinn_pgd(black_box(x.points()), &mut obj, &cfg, p.domain(), 5).unwrap()
        })
    });
    c.bench_function("sais_step/300x10", |b| {
        b.iter(|| {
            let r = |pts: &atpinn_core::Tensor| Ok(p.residual_values(&params, pts)?.into_iter().map(f64::abs).collect());
            sais_step(300, 0.1, 10, p.domain(), r, 6).unwrap()
        })
    });
}

fn oracle(c: &mut Criterion) {
    c.bench_function("burgers_reference/point", |b| {
        b.iter(|| burgers_reference(black_box(0.01), black_box(0.7)).unwrap())
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = training_epoch, residual_grid, attack, oracle
}
criterion_main!(kernels);
