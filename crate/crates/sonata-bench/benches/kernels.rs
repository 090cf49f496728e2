use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use sonata::network::chebyshev_mix;
use sonata::rates::{self, RateInputs};
use sonata::solver::{sonata_undirected_step, StaticMixer};
use sonata::surrogate::PreparedSubproblems;
use sonata::{NetworkState, SurrogateKind};
use sonata_bench::fixture;

fn mixing(c: &mut Criterion) {
    let mut group = c.benchmark_group("mixing");
    for m in [10, 30, 100] {
        let f = fixture(m, 20, SurrogateKind::linearization());
        group.bench_with_input(BenchmarkId::new("plain", m), &f, |b, f| {
            b.iter(|| black_box(f.weights.apply(&f.x0)))
        });
        group.bench_with_input(BenchmarkId::new("chebyshev_k8", m), &f, |b, f| {
            b.iter(|| black_box(chebyshev_mix(&f.weights, &f.x0, 8)))
        });
    }
    group.finish();
}

fn subproblem(c: &mut Criterion) {
    let mut group = c.benchmark_group("subproblem");
    for kind in [SurrogateKind::linearization(), SurrogateKind::local_f()] {
        let f = fixture(10, 20, kind.clone());
        let subs = PreparedSubproblems::new(&f.spec, &f.problem);
        let x = f.x0.row(0).transpose();
        let y = f.problem.losses()[0].gradient(&x);
        group.bench_function(kind.name(), |b| b.iter(|| black_box(subs.solve(0, &x, &y).unwrap())));
    }
    group.finish();
}

fn undirected_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("undirected_step");
    for m in [10, 30] {
        let f = fixture(m, 20, SurrogateKind::local_f());
        let subs = PreparedSubproblems::new(&f.spec, &f.problem);
        let start = NetworkState::new(&f.problem, f.x0.clone());
        group.bench_function(BenchmarkId::from_parameter(m), |b| {
            b.iter(|| {
                let mut s = start.clone();
                sonata_undirected_step(&mut s, &f.problem, &subs, StaticMixer::single(&f.weights), 0.5, false).unwrap();
                black_box(s)
            })
        });
    }
    group.finish();
}

fn certificate(c: &mut Criterion) {
    let inp = RateInputs::local_f(1.0, 100.0, 5.0, 0.6);
    c.bench_function("certify_undirected", |b| b.iter(|| black_box(rates::certify_undirected(black_box(&inp)).unwrap())));
    c.bench_function("stability_polynomial", |b| {
        b.iter(|| rates::stability_polynomial(&inp, black_box(1e-4), black_box(0.9999), rates::EpsilonRule::RateMatched))
    });
}

criterion_group!(benches, mixing, subproblem, undirected_step, certificate);
criterion_main!(benches);
