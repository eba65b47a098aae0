use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use magegraph_core::calibration::fit_isotonic;
use magegraph_core::geo::{
    build_knn_graph, build_semisupervised_graph, GeoPoint, KnnParams, WeekObservation,
};
use magegraph_core::metrics::auc;
use magegraph_core::model::{predict, ModelConfig, ModelParameters};
use magegraph_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<GeoPoint> {
    (0..n)
        .map(|_| {
            GeoPoint::new(rng.random_range(41.4..42.2), rng.random_range(-88.3..-87.5)).unwrap()
        })
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (tensor(&mut rng, 200, 256), tensor(&mut rng, 256, 128));
    c.bench_function("matmul_200x256x128_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, w) = (t.param(a.clone()).unwrap(), t.param(b.clone()).unwrap());
            let y = t.matmul(x, w).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap();
            black_box(t.grad(w).is_some())
        })
    });
}

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs: Vec<WeekObservation> = points(&mut rng, 200)
        .into_iter()
        .enumerate()
        .map(|(i, position)| WeekObservation {
            trap_id: format!("T{i:04}"),
            position,
            label: Some(i % 3 == 0),
        })
        .collect();
    let g = build_semisupervised_graph(0, &obs, KnnParams::new(10, 50.0).unwrap()).unwrap();
    let config = ModelConfig::graphmage(40);
    let params = ModelParameters::init(&config, 1).unwrap();
    let x = tensor(&mut rng, 200, 40);
    c.bench_function("graphmage_predict_200_nodes", |b| {
        b.iter(|| black_box(predict(&x, &g, &params, &config).unwrap().logits[0]))
    });
}

fn knn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos = points(&mut rng, 200);
    let params = KnnParams::new(10, 50.0).unwrap();
    c.bench_function("knn_200_nodes", |b| {
        b.iter(|| black_box(build_knn_graph(&pos, params).len()))
    });
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<bool> = p.iter().map(|&v| rng.random_bool(v)).collect();
    c.bench_function("auc_10k", |b| b.iter(|| black_box(auc(&p, &y).unwrap())));
    c.bench_function("pava_10k", |b| {
        b.iter(|| black_box(fit_isotonic(&p, &y).unwrap().breakpoints().len()))
    });
}

criterion_group!(benches, matmul, forward, knn, ranking);
criterion_main!(benches);
