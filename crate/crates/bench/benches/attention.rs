use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use focal_bench::{attention_fixture, layer_fixture, stage_geometry};
use focal_core::geometry::FocalLevel;
use focal_core::oracle::naive_focal_forward;
use focal_core::{focal_attention_backward, focal_attention_forward, focal_layer_forward, GatherPlan};

fn forward_vs_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("focal_attention");
    group.sample_size(10);
    for side in [14, 28] {
        let (x, params) = attention_fixture(side, stage_geometry(32, 2, 13, 3), 0).unwrap();
        group.bench_with_input(BenchmarkId::new("fast", side), &side, |b, _| {
            b.iter(|| focal_attention_forward(&x, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("oracle", side), &side, |b, _| {
            b.iter(|| naive_focal_forward(&x, &params).unwrap())
        });
    }
    let (x, params) = attention_fixture(14, stage_geometry(32, 2, 13, 3), 1).unwrap();
    let (y, _) = focal_attention_forward(&x, &params).unwrap();
    group.bench_function("backward/14", |b| b.iter(|| focal_attention_backward(&x, &params, &y).unwrap()));
    group.finish();
}

fn gather_plan(c: &mut Criterion) {
    let levels = [FocalLevel::new(1, 13), FocalLevel::new(7, 7)];
    c.bench_function("gather_plan/56", |b| b.iter(|| GatherPlan::build(56, 56, 7, &levels).unwrap()));
}

fn layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("focal_layer");
    group.sample_size(10);
    let (x, params) = layer_fixture(28, stage_geometry(192, 6, 13, 5), 0).unwrap();
    group.bench_function("tiny_stage2", |b| b.iter(|| focal_layer_forward(&x, &params).unwrap()));
    group.finish();
}

criterion_group!(benches, forward_vs_oracle, gather_plan, layer);
criterion_main!(benches);
