use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use resolvent_bench::{cosine_model, flat_model};
use resolvent_core::flow::SimConfig;
use resolvent_core::process::simulate_full;
use resolvent_core::resolvent_grid::{solve_momentum_resolvent, MomentumGrid};
use resolvent_core::sampling::{sample_post_collision, RandomStream};
use resolvent_core::{escape_rate, Modulator, Payoff, PhaseState};
use std::hint::black_box;

fn sampler(c: &mut Criterion) {
    let mut g = c.benchmark_group("post_collision");
    for p in [0.0, 8.0, 100.0] {
        g.bench_with_input(BenchmarkId::from_parameter(p), &p, |b, &p| {
            let mut s = RandomStream::new(1, 0);
            b.iter(|| sample_post_collision(0.25, black_box(p), &mut s).unwrap())
        });
    }
    g.finish();
}

fn rate(c: &mut Criterion) {
    c.bench_function("escape_rate", |b| b.iter(|| escape_rate(black_box(0.25), black_box(3.7))));
}

fn paths(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate_full_t50");
    for (name, params) in [("flat", flat_model(0.25)), ("cosine", cosine_model(0.25))] {
        g.bench_function(name, |b| {
            let cfg = SimConfig::default();
            let mut id = 0;
            b.iter(|| {
                id += 1;
                simulate_full(PhaseState::new(0.1, 2.0), 50.0, &params, &cfg, &mut RandomStream::new(3, id)).unwrap()
            })
        });
    }
    g.finish();
}

fn nystrom(c: &mut Criterion) {
    let mut g = c.benchmark_group("momentum_nystrom");
    g.sample_size(10);
    for lambda in [0.5, 0.125] {
        let params = flat_model(lambda);
        let h = Modulator::standard(&params);
        let f = Payoff::IndicatorBand { lo: 1.0, hi: 3.0 };
        let grid = MomentumGrid::for_problem(lambda, &h, std::slice::from_ref(&f)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(lambda), &lambda, |b, &lambda| {
            b.iter(|| solve_momentum_resolvent(lambda, &h, &f, &grid).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sampler, rate, paths, nystrom);
criterion_main!(benches);
