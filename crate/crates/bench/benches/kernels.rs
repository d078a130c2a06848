use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use imae_bench::{regression_problem, Fixture};
use imae_core::data::{normalize_pix, patchify};
use imae_core::evalsep::{fit_lasso, LassoOptions};
use imae_core::imae::{imae_forward, mae_forward};
use imae_core::mixer::{mix_batch, semantic_pairing};
use imae_core::{LossConfig, MaskSpec, Profile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("step");
    g.sample_size(20);
    let mut f = Fixture::new(Profile::Micro, 16, 32);
    let loss = LossConfig::default();
    g.bench_function("imae_forward_backward_micro_b32", |b| {
        b.iter(|| {
            imae_forward(&f.model, &f.batch, &f.spec, &f.student, Some(&f.teacher), &loss, true, &mut f.rng)
                .expect("forward")
        })
    });
    g.bench_function("imae_forward_only_micro_b32", |b| {
        b.iter(|| {
            imae_forward(&f.model, &f.batch, &f.spec, &f.student, Some(&f.teacher), &loss, false, &mut f.rng)
                .expect("forward")
        })
    });
    let mask = MaskSpec::sample(32, f.model.num_patches(), 0.75, &mut f.rng).expect("mask");
    g.bench_function("mae_forward_backward_micro_b32", |b| {
        b.iter(|| mae_forward(&f.model, &f.batch, &mask, &f.student, true, true).expect("forward"))
    });
    g.finish();
}

fn data_kernels(c: &mut Criterion) {
    let f = Fixture::new(Profile::Micro, 32, 64);
    c.bench_function("patchify_normalize_32px_b64", |b| {
        b.iter(|| normalize_pix(&patchify(black_box(&f.batch), 4).expect("patchify")))
    });
    c.bench_function("mix_batch_32px_b64", |b| b.iter(|| mix_batch(black_box(&f.batch), &f.spec).expect("mix")));
    let labels: Vec<usize> = (0..256).map(|i| i % 10).collect();
    c.bench_function("semantic_pairing_b256_r05", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(3),
            |mut rng| semantic_pairing(&labels, 0.5, &mut rng).expect("pairing"),
            BatchSize::SmallInput,
        )
    });
}

fn lasso(c: &mut Criterion) {
    let mut g = c.benchmark_group("lasso");
    g.sample_size(10);
    let (x, y) = regression_problem(2048, 64, 64, 5);
    g.bench_function("fit_2048x64_to_64", |b| {
        b.iter(|| fit_lasso(&x, &y, 1e-3, LassoOptions::default()).expect("fit"))
    });
    g.finish();
}

criterion_group!(benches, forward_backward, data_kernels, lasso);
criterion_main!(benches);
