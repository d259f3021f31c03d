//! Compares the rayon-backed index map against the sequential fallback on
//! the three workloads that dominate a run: per-sample gradient passes,
//! loss-grid cells, and batched joint-inference rows. Both paths must agree
//! bitwise; the bench reports what the `parallel` feature actually buys.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use motalab::landscape::dataset_loss;
use motalab::nn::{backward, NetworkSpec, ParamSet, TensorLike, TrainItem};
use motalab::stream::{make_stream, StreamSpec};

fn default_net() -> (NetworkSpec, ParamSet) {
    let spec = NetworkSpec::new(16, vec![32, 32], 10, motalab::nn::Activation::Relu);
    let params = ParamSet::xavier_init(&spec, 7);
    (spec, params)
}

fn sample_batch(n: usize) -> Vec<(Vec<f64>, usize)> {
    let spec = StreamSpec::default();
    let stream = make_stream(&spec, 11).expect("default stream");
    let task = &stream.tasks[0];
    (0..n)
        .map(|i| {
            let s = &task.train.samples[i % task.train.samples.len()];
            (s.x.clone(), s.y)
        })
        .collect()
}

fn bench_per_sample_grads(c: &mut Criterion) {
    let (_, params) = default_net();
    let batch = sample_batch(256);
    let items: Vec<TrainItem<'_>> = batch.iter().map(|(x, y)| TrainItem::plain(x, *y)).collect();

    let mut group = c.benchmark_group("per_sample_grads");
    group.bench_with_input(BenchmarkId::new("sequential", items.len()), &items, |b, items| {
        b.iter(|| {
            motalab::exec::run_indexed_seq(items.len(), |i| {
                backward(&params, &items[i..i + 1]).expect("grad")
            })
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_with_input(BenchmarkId::new("parallel", items.len()), &items, |b, items| {
        b.iter(|| {
            motalab::exec::run_indexed_par(items.len(), |i| {
                backward(&params, &items[i..i + 1]).expect("grad")
            })
        })
    });
    group.finish();
}

fn bench_grid_cells(c: &mut Criterion) {
    let (spec, params) = default_net();
    let stream_spec = StreamSpec::default();
    let stream = make_stream(&stream_spec, 11).expect("default stream");
    let task = &stream.tasks[0];
    let delta = ParamSet::xavier_init(&spec, 21);
    let eta = ParamSet::xavier_init(&spec, 22);
    let coeffs: Vec<f64> = (0..21).map(|i| -1.5 + 0.15 * i as f64).collect();
    let cells = coeffs.len() * coeffs.len();
    let eval = |idx: usize| {
        let a = coeffs[idx / coeffs.len()];
        let b = coeffs[idx % coeffs.len()];
        let point = params
            .offset_by(a, delta.data(), b, eta.data())
            .expect("offset");
        dataset_loss(&point, &task.val, None).expect("loss")
    };

    let mut group = c.benchmark_group("grid_cells");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", cells), |b| {
        b.iter(|| motalab::exec::run_indexed_seq(cells, eval))
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("parallel", cells), |b| {
        b.iter(|| motalab::exec::run_indexed_par(cells, eval))
    });
    group.finish();
}

fn bench_joint_eval_rows(c: &mut Criterion) {
    let spec = NetworkSpec::new(16, vec![19, 19], 10, motalab::nn::Activation::Relu);
    let modes = vec![
        ParamSet::xavier_init(&spec, 31),
        ParamSet::xavier_init(&spec, 32),
    ];
    let batch = sample_batch(400);
    let eval = |i: usize| {
        motalab::mota::joint_inference(&modes, &batch[i].0, None).expect("joint")
    };

    let mut group = c.benchmark_group("joint_eval_rows");
    group.bench_function(BenchmarkId::new("sequential", batch.len()), |b| {
        b.iter(|| motalab::exec::run_indexed_seq(batch.len(), eval))
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("parallel", batch.len()), |b| {
        b.iter(|| motalab::exec::run_indexed_par(batch.len(), eval))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_per_sample_grads,
    bench_grid_cells,
    bench_joint_eval_rows
);
criterion_main!(benches);
