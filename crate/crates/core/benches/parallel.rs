//! Sequential (one-thread pool) against the default rayon pool on the
//! data-parallel kernels. Build with `--no-default-features` to measure the
//! plain-iterator fallback instead; both arms then run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvinpaint::depth_fill::{classify, propagate, PropagateParams};
use mvinpaint::features::{detect_describe, DetectorParams};
use mvinpaint::grid::{DepthMap, Mask};
use mvinpaint::synth::{render_scene, SceneParams};
use rayon::ThreadPool;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn small_scene() -> SceneParams {
    SceneParams {
        width: 160,
        height: 120,
        frames: 4,
        focal: 130.0,
        ..SceneParams::default()
    }
}

fn bench_render(c: &mut Criterion) {
    let mut g = c.benchmark_group("render");
    g.sample_size(10);
    let params = small_scene();
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| render_scene(&params))));
    }
    g.finish();
}

fn bench_detect(c: &mut Criterion) {
    let scene = render_scene(&SceneParams {
        frames: 1,
        ..SceneParams::default()
    });
    let gray = scene.sequence.frames[0].color.to_color().to_gray();
    let params = DetectorParams::default();
    let mut g = c.benchmark_group("detect_describe");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| detect_describe(&gray, None, &params))));
    }
    g.finish();
}

fn bench_propagate(c: &mut Criterion) {
    let (w, h) = (160, 120);
    let depth = DepthMap::from_fn(w, h, |x, y| 1.0 + 0.01 * x as f32 + 0.005 * y as f32);
    let holes = Mask::from_fn(w, h, |x, y| (40..120).contains(&x) && (30..90).contains(&y));
    let edges = Mask::from_fn(w, h, |x, _| x == 80);
    let map = classify(&holes, &edges);
    let params = PropagateParams {
        max_iters: 200,
        ..PropagateParams::default()
    };
    let mut g = c.benchmark_group("propagate");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| propagate(&depth, &map, &params))));
    }
    g.finish();
}

criterion_group!(benches, bench_render, bench_detect, bench_propagate);
criterion_main!(benches);
