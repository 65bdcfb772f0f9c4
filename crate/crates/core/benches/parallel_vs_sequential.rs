//! Parallel vs sequential execution of the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ivr_core::datasets::collect_with;
use ivr_core::exact::{regularized_backup_with, solve_fixed_point_with, RegularizedModel};
use ivr_core::mdp::{build_four_rooms, random_mdp, random_policy, rollout_with, Policy};
use ivr_core::par::Exec;
use ivr_core::regularizers::make_chi_square;
use ivr_core::rng::substream;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn backup(c: &mut Criterion) {
    let mut rng = substream(0, "bench");
    let (ns, na) = (2000, 8);
    let mdp = random_mdp(ns, na, 0.95, 5, &mut rng).unwrap();
    let mu = random_policy(ns, na, 0.05, &mut rng);
    let model = RegularizedModel::from_mdp(&mdp, &mu).unwrap();
    let reg = make_chi_square();
    let v: Vec<f64> = (0..ns).map(|s| (s as f64).sin()).collect();
    let mut group = c.benchmark_group("regularized_backup");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| regularized_backup_with(&model, black_box(&v), 0.5, &reg, exec).unwrap())
        });
    }
    group.finish();
}

fn solve(c: &mut Criterion) {
    let world = build_four_rooms();
    let (ns, na) = (world.mdp.n_states(), world.mdp.n_actions());
    let model = RegularizedModel::from_mdp(&world.mdp, &Policy::uniform(ns, na)).unwrap();
    let reg = make_chi_square();
    let mut group = c.benchmark_group("solve_four_rooms");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| solve_fixed_point_with(&model, 0.5, &reg, 1e-10, 100_000, exec).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let world = build_four_rooms();
    let (ns, na) = (world.mdp.n_states(), world.mdp.n_actions());
    let pi = Policy::uniform(ns, na);
    let mut group = c.benchmark_group("sampling");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("rollout", name), &exec, |b, &exec| {
            b.iter(|| rollout_with(&world.mdp, &pi, 1000, 100, 7, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("collect", name), &exec, |b, &exec| {
            b.iter(|| collect_with(&world.mdp, &pi, 1000, 20, 7, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, backup, solve, sampling);
criterion_main!(benches);
