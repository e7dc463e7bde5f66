//! Per-sample gradients of a training batch and dataset generation, once
//! through the data-parallel map and once through the sequential reference.
//! Build with `--no-default-features` to time the fallback path of
//! `map_indexed` itself.

use criterion::{criterion_group, criterion_main, Criterion};

use sharedws::config::RunConfig;
use sharedws::models::{Ctx, InputSpec, Model};
use sharedws::parallel::{map_indexed, map_indexed_seq, threads};
use sharedws::tasks::{clevr, generate, Split};
use sharedws::train::sample_pass;

fn batch_gradients(c: &mut Criterion) {
    let mut cfg = RunConfig::smoke();
    cfg.task.n_train = 32;
    let data = generate(&cfg.task, Split::Train).unwrap();
    let spec = InputSpec::for_task(&cfg.task).unwrap();
    let (model, store, _) = Model::build::<f32>(&cfg.model, &spec).unwrap();
    let pass = |i: usize| {
        sample_pass(&model, &store, &data.example(i), &mut Ctx::eval(), true)
            .unwrap()
            .0
            .loss
    };
    let mut group = c.benchmark_group(format!("batch_gradients_{}_threads", threads()));
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| map_indexed(data.len(), pass)));
    group.bench_function("sequential", |b| b.iter(|| map_indexed_seq(data.len(), pass)));
    group.finish();
}

fn dataset_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("clevr_generation");
    group.sample_size(10);
    let make = |i: usize| clevr::sample(1, Split::Train, i).unwrap();
    group.bench_function("parallel", |b| b.iter(|| map_indexed(256, make)));
    group.bench_function("sequential", |b| b.iter(|| map_indexed_seq(256, make)));
    group.finish();
}

criterion_group!(benches, batch_gradients, dataset_generation);
criterion_main!(benches);
