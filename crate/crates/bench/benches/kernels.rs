use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use easynlp_bench::random_tensor;
use easynlp_core::distill::{kd_loss, KdConfig};
use easynlp_core::fewshot::{cp_tuning_loss, CpConfig};
use easynlp_core::{Rng, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = Rng::new(1);
    for n in [16, 64, 128] {
        let a = random_tensor(&mut rng, &[n, n]);
        let b = random_tensor(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.leaf(&a.clone().with_grad(true)), tape.leaf(&b.clone().with_grad(true)));
                let y = tape.matmul(va, vb).unwrap();
                let l = tape.sum(y).unwrap();
                black_box(tape.gradients(l).unwrap());
            })
        });
    }
    group.finish();
}

fn attention_softmax(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let x = random_tensor(&mut rng, &[8, 32, 32]);
    let keep = vec![true; 8 * 32 * 32];
    c.bench_function("masked_softmax_8x32x32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x.clone().with_grad(true));
            let y = tape.masked_softmax(v, &keep).unwrap();
            let l = tape.sum(y).unwrap();
            black_box(tape.gradients(l).unwrap());
        })
    });
}

fn losses(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let logits = random_tensor(&mut rng, &[32, 4]);
    let teacher = random_tensor(&mut rng, &[32, 4]).into_data();
    let hard: Vec<usize> = (0..32).map(|i| i % 4).collect();
    c.bench_function("kd_loss_32x4", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let v = tape.leaf(&logits.clone().with_grad(true));
            let l = kd_loss(&mut tape, v, &teacher, &hard, &KdConfig::default()).unwrap();
            black_box(tape.gradients(l).unwrap());
        })
    });
    let hiddens = random_tensor(&mut rng, &[32, 64]);
    c.bench_function("cp_tuning_loss_32x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let v = tape.leaf(&hiddens.clone().with_grad(true));
            let l = cp_tuning_loss(&mut tape, v, &hard, CpConfig::default()).unwrap();
            black_box(tape.gradients(l).unwrap());
        })
    });
}

criterion_group!(benches, matmul, attention_softmax, losses);
criterion_main!(benches);
