use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand_free::lm;
use t2l_core::base_lm::TokenBatch;
use t2l_core::eval::FlopsReport;
use t2l_core::lora::merge;
use t2l_core::{AdapterSet, Tape, Tensor};

mod rand_free {
    use t2l_core::{BaseLm, BaseLmConfig};

    pub fn lm() -> BaseLm {
        BaseLm::init(BaseLmConfig::default(), 0).unwrap()
    }
}

fn matmul(c: &mut Criterion) {
    let a = Tensor::from_fn([64, 64], |i| (i % 7) as f64 * 0.1);
    let b = Tensor::from_fn([64, 64], |i| (i % 5) as f64 * 0.2);
    c.bench_function("matmul_64", |bch| bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    c.bench_function("matmul_64_tape_backward", |bch| {
        bch.iter(|| {
            let mut t = Tape::new();
            let x = t.leaf(&a, true);
            let y = t.leaf(&b, true);
            let z = t.matmul(x, y).unwrap();
            let s = t.sum(z);
            t.backward(s).unwrap();
            black_box(t.grad_slice(x).map(|g| g[0]))
        })
    });
}

fn base_forward(c: &mut Criterion) {
    let lm = lm();
    let rows: Vec<Vec<usize>> = (0..8).map(|r| (0..16).map(|i| (r + i) % 64).collect()).collect();
    let batch = TokenBatch::new(&rows).unwrap();
    let set = AdapterSet::init(&lm.lora_layout(4).unwrap(), 1).unwrap();
    c.bench_function("base_forward_8x16", |b| b.iter(|| lm.forward(black_box(&batch), None).unwrap()));
    c.bench_function("base_forward_8x16_lora", |b| b.iter(|| lm.forward(black_box(&batch), Some(&set)).unwrap()));
    let w0 = Tensor::zeros([64, 64]);
    c.bench_function("lora_merge_64_r4", |b| b.iter(|| merge(black_box(&w0), &set.pairs[0]).unwrap()));
}

fn flops(c: &mut Criterion) {
    c.bench_function("flops_paper", |b| b.iter(|| black_box(FlopsReport::paper()).pipeline));
}

criterion_group!(benches, matmul, base_forward, flops);
criterion_main!(benches);
