use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gpda_bench::{random_mat, step_fixture};
use gpda_core::baselines::{McdaBatch, McdaOptimizer, McdaStep};
use gpda_core::objectives::{composite_losses, step_value_and_grad, StepBatch, StepKind};
use gpda_core::uncertainty::{bayes_error, bhattacharyya};
use gpda_core::{evaluate, train, BayesMode, McdaModel, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn products(c: &mut Criterion) {
    let a = random_mat(320, 8, 1);
    let b = random_mat(8, 64, 2);
    let w = random_mat(20, 8, 3);
    c.bench_function("matmul 320x8x64", |bench| bench.iter(|| a.matmul(&b)));
    c.bench_function("matmul_bt 320x8 by 20x8", |bench| bench.iter(|| a.matmul_bt(&w)));
}

fn gpda_steps(c: &mut Criterion) {
    for draws in [10, 50] {
        let f = step_fixture(draws);
        let batch = StepBatch {
            source_x: &f.source.x,
            source_y: &f.source.y,
            source_total: f.data.source.len(),
            target_x: &f.target,
        };
        let w = f.config.separation();
        c.bench_function(&format!("losses M={draws}"), |bench| {
            bench.iter(|| composite_losses(&f.model.q, &f.model.net, &batch, &f.noise, &w).unwrap())
        });
        for (name, kind) in [("inference", StepKind::Inference), ("model", StepKind::Model)] {
            c.bench_function(&format!("{name} step gradient M={draws}"), |bench| {
                bench.iter(|| step_value_and_grad(kind, &f.model.q, &f.model.net, &batch, &f.noise, &w).unwrap())
            });
        }
    }
}

fn mcda_steps(c: &mut Criterion) {
    let f = step_fixture(10);
    let model = McdaModel::init(&f.config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = McdaBatch {
        source_x: &f.source.x,
        source_y: &f.source.y,
        target_x: &f.target,
    };
    c.bench_function("mcda generator step", |bench| {
        bench.iter_batched(
            || (model.clone(), McdaOptimizer::new(&model, f.config.adam())),
            |(mut m, mut opt)| opt.step(&mut m, McdaStep::Generator, &batch).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn training(c: &mut Criterion) {
    let f = step_fixture(10);
    let cfg = TrainConfig { steps: 50, ..f.config.clone() };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("50 rounds", |bench| bench.iter(|| train(&cfg, &f.data).unwrap()));
    group.bench_function("evaluate target test", |bench| bench.iter(|| evaluate(&f.model, &f.data.target_test).unwrap()));
    group.finish();
}

fn scores(c: &mut Criterion) {
    c.bench_function("bhattacharyya", |bench| bench.iter(|| bhattacharyya(1.3, 0.4, -0.2, 0.9).unwrap()));
    c.bench_function("bayes error", |bench| bench.iter(|| bayes_error(1.3, 0.4, -0.2, 0.9, BayesMode::AsWritten).unwrap()));
}

criterion_group!(benches, products, gpda_steps, mcda_steps, training, scores);
criterion_main!(benches);
