//! Throughput of the hot paths at the default model size.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hyperformer_core::config::{OptimizerKind, RunConfig, Variant};
use hyperformer_core::harness::{train_step, Optimizer};
use hyperformer_core::hyper::{generate, WeightCache};
use hyperformer_core::model::{build_model, Batch, Model};
use hyperformer_core::tasks::{Example, TaskRegistry};

fn setup(variant: Variant) -> (Model, TaskRegistry) {
    let mut run = RunConfig::default();
    run.model.variant = variant;
    let specs = run.data.task_specs(run.seed).unwrap();
    let reg = TaskRegistry::from_specs(&specs, run.model.vocab).unwrap();
    (build_model(&run.model, &reg, 0).unwrap(), reg)
}

fn batch(model: &Model, reg: &TaskRegistry, n: usize) -> Batch {
    let ex: Vec<&Example> = reg.task(0).splits.train.iter().take(n).collect();
    Batch::from_examples(model, &ex, 0).unwrap()
}

// ── benches ─────────────────────────────────────────────────────────

fn train_steps(c: &mut Criterion) {
    for variant in [Variant::FullFinetune, Variant::Adapters, Variant::HyperFormer, Variant::HyperFormerPP] {
        let (model, reg) = setup(variant);
        let b = batch(&model, &reg, 16);
        c.bench_function(&format!("train_step/{variant}"), |bench| {
            bench.iter_batched(
                || (model.clone(), Optimizer::new(OptimizerKind::Adam, 3e-4)),
                |(mut m, mut opt)| train_step(&mut m, &mut opt, &b, 0, 1).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

fn forward(c: &mut Criterion) {
    let (model, reg) = setup(Variant::HyperFormerPP);
    let b = batch(&model, &reg, 16);
    c.bench_function("forward/hyperformer++", |bench| bench.iter(|| model.forward(&b, 0, None).unwrap()));
    let mut cache = WeightCache::new();
    c.bench_function("forward_cached/hyperformer++", |bench| {
        bench.iter(|| model.forward(&b, 0, Some(&mut cache)).unwrap())
    });
}

fn hypernetwork(c: &mut Criterion) {
    let (model, _) = setup(Variant::HyperFormerPP);
    c.bench_function("generate_adapter/hyperformer++", |bench| bench.iter(|| generate(&model, 0, 1, 1, 1).unwrap()));
}

fn decoding(c: &mut Criterion) {
    let (model, reg) = setup(Variant::HyperFormerPP);
    let sources: Vec<&[usize]> = reg.task(1).splits.test.iter().take(32).map(|e| e.source.as_slice()).collect();
    c.bench_function("decode_greedy/32", |bench| {
        bench.iter(|| {
            let mut cache = WeightCache::new();
            model.decode_greedy(&sources, 1, 8, Some(&mut cache)).unwrap()
        })
    });
}

criterion_group!(benches, train_steps, forward, hypernetwork, decoding);
criterion_main!(benches);
