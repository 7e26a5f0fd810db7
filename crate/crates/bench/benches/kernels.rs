use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use kvbabel::lm::{LanguageModel, ModelConfig, TokenBatch};
use kvbabel::objectives::prefix_cache;
use kvbabel::translator::{build_adapter_pair, translate, TranslatorConfig};
use kvbabel::{no_grad, Rng, Tensor};
use std::hint::black_box;

fn tokens(b: usize, n: usize, seed: u64) -> TokenBatch {
    let mut rng = Rng::seed(seed);
    TokenBatch::new((0..b * n).map(|_| rng.below(64)).collect(), b, n).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::seed(0);
    let a = Tensor::randn(&[16, 64, 32], 1.0, &mut rng);
    let b = Tensor::randn(&[32, 128], 1.0, &mut rng);
    c.bench_function("matmul 16x64x32 @ 32x128", |bench| {
        bench.iter(|| no_grad(|| black_box(a.matmul(&b).unwrap())))
    });
}

fn lm(c: &mut Criterion) {
    let model = LanguageModel::init(ModelConfig::toy(2), 0).unwrap();
    let batch = tokens(16, 64, 1);
    c.bench_function("lm forward B16 T64", |bench| {
        bench.iter(|| no_grad(|| black_box(model.forward(&batch).unwrap().0)))
    });
    c.bench_function("lm forward+backward B16 T64", |bench| {
        bench.iter(|| {
            let loss = model.full_loss(&batch).unwrap();
            loss.backward().unwrap();
            model.params().iter().for_each(Tensor::zero_grad);
        })
    });
}

fn translator(c: &mut Criterion) {
    let mut model = LanguageModel::init(ModelConfig::toy(2), 0).unwrap();
    model.freeze();
    let t = TranslatorConfig::default();
    let a = build_adapter_pair(model.config(), &t, 1).unwrap();
    let b = build_adapter_pair(model.config(), &t, 2).unwrap();
    let cache = no_grad(|| prefix_cache(&model, &tokens(16, 64, 3), 32)).unwrap();
    c.bench_function("translate B16 S32", |bench| {
        bench.iter(|| no_grad(|| black_box(translate(&cache, &a, &b).unwrap())))
    });
    c.bench_function("translate+backward B16 S32", |bench| {
        bench.iter_batched(
            || (),
            |_| {
                let out = translate(&cache, &a, &b).unwrap();
                out.keys.add(&out.values).unwrap().sum().backward().unwrap();
                a.params().iter().chain(b.params().iter()).for_each(Tensor::zero_grad);
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, matmul, lm, translator);
criterion_main!(benches);
