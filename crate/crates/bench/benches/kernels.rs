use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use selfablate::data::synth::synth_stories;
use selfablate::kernels::matmul;
use selfablate::kwta::{hard_mask, GateScores};
use selfablate::train::{TrainConfig, Trainer};
use selfablate::{AblationMode, ModelConfig, Tape, Tensor};
use std::hint::black_box;

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &(m, k, n) in &[(2048, 64, 64), (2048, 64, 256), (2048, 256, 64), (2048, 64, 257)] {
        let a = randn(&[m, k], 1);
        let b = randn(&[k, n], 2);
        group.throughput(Throughput::Elements((2 * m * k * n) as u64));
        group.bench_function(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), |bench| {
            bench.iter(|| matmul(black_box(&a), black_box(&b), false, false).unwrap())
        });
    }
    group.finish();
}

/// Mask selection and the straight-through gate across unit counts.
fn bench_gate(c: &mut Criterion) {
    let mut group = c.benchmark_group("gate");
    let rows = 512;
    for &n in &[16, 64, 256, 1024] {
        let scores = randn(&[rows, n], 3);
        group.throughput(Throughput::Elements((rows * n) as u64));
        let gs = GateScores::new(scores.clone()).unwrap();
        group.bench_with_input(BenchmarkId::new("hard_mask", n), &n, |bench, _| {
            bench.iter(|| hard_mask(black_box(&gs), 4).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("ste_forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let x = tape.param(scores.clone());
                let loss = x.ste_gate(4).unwrap().sum().unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let docs = synth_stories(0, 200_000);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for mode in [AblationMode::None, AblationMode::Local, AblationMode::Global] {
        let cfg = TrainConfig {
            total_steps: 1_000_000,
            batch_size: 4,
            seq_len: 64,
            eval_interval: 1_000_000,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(ModelConfig::desk(mode, 1), cfg, &docs).unwrap();
        group.bench_function(BenchmarkId::from_parameter(mode), |bench| {
            bench.iter(|| trainer.step().unwrap().loss)
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_gate, bench_train_step);
criterion_main!(benches);
