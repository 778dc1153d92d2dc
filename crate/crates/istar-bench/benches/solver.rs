use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use istar_bench::random_problem;
use istar_core::solver::{estimate_lipschitz, solve};
use istar_core::IstaSolverConfig;

fn bench_solve(c: &mut Criterion) {
    for (m, n) in [(8usize, 16usize), (32, 64)] {
        let problem = random_problem(m, n, 7);
        let alpha = 0.99 / estimate_lipschitz(&problem.d);
        let cfg = IstaSolverConfig {
            alpha: Some(alpha),
            max_iters: 200,
            tol: 0.0,
        };
        c.bench_function(&format!("ista solve {m}x{n}, 200 iters"), |b| {
            b.iter(|| solve(black_box(&problem), &cfg).unwrap())
        });
    }
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_solve
);
criterion_main!(benches);
