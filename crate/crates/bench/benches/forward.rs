use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stmotion_bench::{model, moe, window};
use stmotion_core::{predict, DType, FfnKind, Graph, Rng, Tensor};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_next");
    for hidden in [64, 512, 2048] {
        let m = model(FfnKind::Dense, hidden);
        let w = window(&m);
        group.bench_with_input(BenchmarkId::new("dense", hidden), &w, |b, w| {
            b.iter(|| m.predict_next(w).unwrap())
        });
    }
    for experts in [2, 8, 32] {
        let m = model(moe(experts), 64);
        let w = window(&m);
        group.bench_with_input(BenchmarkId::new("moe", experts), &w, |b, w| {
            b.iter(|| m.predict_next(w).unwrap())
        });
    }
    group.finish();
}

fn rollout(c: &mut Criterion) {
    let m = model(moe(4), 64);
    let w = window(&m);
    c.bench_function("predict_24_moe4", |b| b.iter(|| predict(&m, &w, 24).unwrap()));
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::seed_from(2);
    let a = Tensor::from_fn(&[128, 128], |_| rng.normal());
    let b = Tensor::from_fn(&[128, 128], |_| rng.normal());
    c.bench_function("matmul_backward_128", |bch| {
        bch.iter(|| {
            let mut g = Graph::new(DType::F64);
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let p = g.matmul(x, y).unwrap();
            let l = g.sum(p);
            g.backward(l).unwrap();
        })
    });
}

criterion_group!(benches, forward, rollout, matmul);
criterion_main!(benches);
