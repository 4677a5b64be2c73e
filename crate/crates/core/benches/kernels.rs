//! Hot kernels on the rayon pool versus a single-thread pool. Build with
//! `--no-default-features` to time the plain sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gsvox::alignment::{retrieval_topk, EmbeddingBatch, Modality};
use gsvox::losses::chamfer_distance;
use gsvox::raster::{render, render_backward, RenderGrads};
use gsvox::scene::{build_demo, DemoSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(String, Option<rayon::ThreadPool>)> {
    let mut out = vec![("default".to_string(), None)];
    if gsvox::exec::is_parallel() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
        out.push(("1-thread".to_string(), Some(one)));
    }
    out
}

fn run<R>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn kernels(c: &mut Criterion) {
    let demo = build_demo(&DemoSpec::default()).expect("demo");
    let cam = demo.views[0].camera.clone();
    let up = {
        let mut g = RenderGrads::zeros(cam.width, cam.height);
        g.color.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        g
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let raw: Vec<f64> = (0..419 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = EmbeddingBatch::new(Modality::S, 64, raw.clone()).expect("batch");
    let g = EmbeddingBatch::new(Modality::P, 64, raw.iter().rev().copied().collect()).expect("batch");
    let pts: Vec<[f64; 3]> = demo.pretrained.iter().map(|g| g.position.into()).collect();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("render_64x64", &name), |b| {
            b.iter(|| run(&pool, || black_box(render(&demo.pretrained, &cam))))
        });
        group.bench_function(BenchmarkId::new("render_backward_64x64", &name), |b| {
            b.iter(|| run(&pool, || black_box(render_backward(&demo.pretrained, &cam, &up).expect("backward"))))
        });
        group.bench_function(BenchmarkId::new("retrieval_419", &name), |b| {
            b.iter(|| run(&pool, || black_box(retrieval_topk(&q, &g, &[1, 5, 10]).expect("topk"))))
        });
        group.bench_function(BenchmarkId::new("chamfer_1000", &name), |b| {
            b.iter(|| run(&pool, || black_box(chamfer_distance(&pts, &pts).expect("chamfer"))))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
