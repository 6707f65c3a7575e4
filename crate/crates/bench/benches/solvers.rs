use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use coupled_ipm::admm::{self, AdmmSettings, OuterSystem};
use coupled_ipm::baseline::{self, BaselineParams};
use coupled_ipm::ipm_exact::{self, ExactParams};
use coupled_ipm::ipm_inexact::{self, InexactParams};
use coupled_ipm::kkt::dense_direction;
use coupled_ipm::netsim::Network;
use coupled_ipm_bench::{centring_mu, desk};

fn directions(c: &mut Criterion) {
    let (problem, z) = desk(1);
    let mu = centring_mu(&problem, &z);
    let mut g = c.benchmark_group("direction");
    g.bench_function("dense", |b| b.iter(|| dense_direction(&problem, &z, mu).unwrap()));
    g.bench_function("factorize", |b| b.iter(|| OuterSystem::build(&problem, &z, mu, 0.5, 0).unwrap()));
    let system = OuterSystem::build(&problem, &z, mu, 0.5, 0).unwrap();
    let settings = AdmmSettings::uniform(problem.num_agents(), 0.5, 1.0, 1e-8, 1e-8, 100_000);
    g.bench_function("admm", |b| {
        b.iter_batched(
            || Network::for_problem(&problem),
            |mut net| admm::run(&problem, &z, &system, &settings, None, &mut net, None).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn solvers(c: &mut Criterion) {
    let (problem, init) = desk(3);
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    g.bench_function("exact", |b| b.iter(|| ipm_exact::solve(&problem, &init, &ExactParams::default()).unwrap()));
    g.bench_function("inexact", |b| b.iter(|| ipm_inexact::solve(&problem, &init, &InexactParams::default()).unwrap()));
    g.bench_function("baseline", |b| b.iter(|| baseline::solve(&problem, &init, &BaselineParams::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, directions, solvers);
criterion_main!(benches);
