use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textplace::embed_index::structural_embed;
use textplace::pipeline::{self, query_subgraph, QueryMode, QueryOptions};
use textplace::retrieval::{ged, GedCosts, JointModel, ModelConfig, DEFAULT_BUDGET};
use textplace_bench::{fixture, random_index, random_unit};

fn extract_candidates(c: &mut Criterion) {
    let mut group = c.benchmark_group("extract_candidates");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for len in [1_000usize, 10_000] {
        let index = random_index(len, 256, 1);
        let q = random_unit(&mut rng, 256);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| index.extract_candidates(black_box(&q), 10).unwrap())
        });
    }
    group.finish();
}

fn graph_edit_distance(c: &mut Criterion) {
    let fx = fixture(16, 1, 3);
    let scene = fx.db.scenes().next().unwrap();
    let text = query_subgraph(scene).unwrap();
    let other = fx.db.scenes().nth(1).unwrap();
    let costs = GedCosts::subgraph();
    let mut group = c.benchmark_group("ged");
    group.bench_function("text_vs_own_scene", |b| {
        b.iter(|| ged(black_box(&text), scene, &costs, DEFAULT_BUDGET).unwrap())
    });
    group.bench_function("text_vs_other_scene", |b| {
        b.iter(|| ged(black_box(&text), other, &costs, DEFAULT_BUDGET).unwrap())
    });
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let fx = fixture(16, 1, 4);
    let scene = fx.db.scenes().next().unwrap();
    c.bench_function("structural_embed_256", |b| b.iter(|| structural_embed(black_box(scene), 256).unwrap()));
}

fn joint_forward(c: &mut Criterion) {
    let fx = fixture(16, 1, 5);
    let scene = fx.db.scenes().next().unwrap();
    let text = query_subgraph(scene).unwrap();
    let model = JointModel::new(ModelConfig::default(), 0).unwrap();
    c.bench_function("joint_match_probability", |b| {
        b.iter(|| model.match_probability(black_box(&text), scene).unwrap())
    });
}

fn end_to_end(c: &mut Criterion) {
    let fx = fixture(256, 8, 6);
    let mut group = c.benchmark_group("query");
    group.sample_size(20);
    for (name, mode) in [("candidates_only", QueryMode::None), ("candidates_rerank", QueryMode::Ged)] {
        let opts = QueryOptions { mode, ..QueryOptions::default() };
        group.bench_function(name, |b| {
            b.iter(|| {
                for q in &fx.queries {
                    pipeline::query(&fx.db, &fx.index, &q.description(), &opts).unwrap();
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, extract_candidates, graph_edit_distance, embedding, joint_forward, end_to_end);
criterion_main!(benches);
