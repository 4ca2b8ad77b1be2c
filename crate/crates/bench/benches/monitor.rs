use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use metacog_bench as gen;
use metacog_core::calibration::fit;
use metacog_core::signals::{cluster_documents, reasoning_entropy, searching_entropy, ClusterParams};
use metacog_core::testing;
use metacog_core::{Agent, RunConfig};

fn searching(c: &mut Criterion) {
    let mut group = c.benchmark_group("searching_entropy");
    let params = ClusterParams::default();
    for n in [5usize, 10, 20] {
        let docs = gen::document_embeddings(&mut gen::rng(1), n, 3, 256);
        group.bench_with_input(BenchmarkId::from_parameter(n), &docs, |b, docs| {
            b.iter(|| searching_entropy(&cluster_documents(black_box(docs), &params).unwrap()))
        });
    }
    group.finish();
}

fn reasoning(c: &mut Criterion) {
    let mut group = c.benchmark_group("reasoning_entropy");
    for len in [64usize, 512] {
        let positions = gen::reasoning_positions(&mut gen::rng(2), len, 20);
        group.bench_with_input(BenchmarkId::from_parameter(len), &positions, |b, p| {
            b.iter(|| reasoning_entropy(black_box(p)).unwrap())
        });
    }
    group.finish();
}

fn calibration(c: &mut Criterion) {
    let points = gen::calibration_points(&mut gen::rng(3), 10_000);
    c.bench_function("fit_10000", |b| b.iter(|| fit(black_box(&points), 2.0).unwrap()));
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve_top2");
    for n in [100usize, 1000] {
        let mut rng = gen::rng(4);
        let store = gen::memory_store(&mut rng, n, 256);
        let q = gen::query_embedding(&mut rng, 256);
        group.bench_with_input(BenchmarkId::from_parameter(n), &store, |b, s| {
            b.iter(|| s.retrieve_by_embedding(black_box(&q), 2).unwrap())
        });
    }
    group.finish();
}

fn trajectory(c: &mut Criterion) {
    let mut group = c.benchmark_group("scenario_trajectory");
    let q = testing::query("bench");
    let variants = [
        ("plain", false, false),
        ("fast_only", true, false),
        ("fast_and_slow", true, true),
    ];
    for (name, fast, slow) in variants {
        let (deps, _) = testing::deps();
        let cfg = RunConfig {
            fast_monitor_enabled: fast,
            slow_monitor_enabled: slow,
            ..testing::run_config(None)
        };
        let agent = Agent::new(deps, cfg).unwrap();
        group.bench_function(name, |b| b.iter(|| agent.run_trajectory(black_box(&q))));
    }
    group.finish();
}

criterion_group!(benches, searching, reasoning, calibration, retrieval, trajectory);
criterion_main!(benches);
