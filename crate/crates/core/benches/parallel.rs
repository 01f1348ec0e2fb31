use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvbsde::convex::ConvexSpec;
use mvbsde::engine::{solve_penalized, PenaltyMode, Problem, SolverOpts};
use mvbsde::generator::{DriverKind, GeneratorSpec};
use mvbsde::sim::{simulate, GridConfig, Terminal};
use mvbsde::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn grid() -> GridConfig {
    GridConfig {
        paths: 10_000,
        steps: 50,
        seed: 3,
        ..Default::default()
    }
}

fn bench_simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| simulate(black_box(&grid()), exec).unwrap())
        });
    }
    g.finish();
}

fn bench_solve(c: &mut Criterion) {
    let prob = Problem::new(
        GeneratorSpec::new(DriverKind::constant(-1.0), DriverKind::Zero, 1, 1).unwrap(),
        ConvexSpec::indicator(0.0, f64::INFINITY).unwrap(),
        ConvexSpec::zero(1),
        Terminal::constant(0.0),
    )
    .unwrap();
    let ens = simulate(&grid(), Exec::Parallel).unwrap();
    let mut g = c.benchmark_group("solve_penalized");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = SolverOpts {
            penalty: PenaltyMode::Implicit,
            exec,
            ..Default::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| solve_penalized(&ens, black_box(&prob), 0.1, opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_simulate, bench_solve);
criterion_main!(benches);
