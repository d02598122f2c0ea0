use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use t2l_core::task_embed::embed_hashed;
use t2l_core::train::{train_t2l_recon, TrainConfig};
use t2l_core::{AdapterLibrary, AdapterSet, Arch, BaseLm, BaseLmConfig, Hypernet, HypernetConfig, TaskInput};

fn inputs(n: usize) -> Vec<TaskInput> {
    (0..n)
        .map(|i| embed_hashed(&format!("task number {i} sorts tokens"), 64, 7).unwrap().into())
        .collect()
}

fn generate(c: &mut Criterion) {
    let lm = BaseLm::init(BaseLmConfig::default(), 0).unwrap();
    let layout = lm.lora_layout(4).unwrap();
    let tasks = inputs(8);
    let mut g = c.benchmark_group("generate_8_tasks");
    for arch in Arch::ALL {
        let net = Hypernet::build(HypernetConfig::new(arch, 64, layout.clone()), 1).unwrap();
        g.bench_with_input(BenchmarkId::new("batched", arch), &net, |b, net| {
            b.iter(|| net.generate(black_box(&tasks)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sequential", arch), &net, |b, net| {
            b.iter(|| net.generate_sequential(black_box(&tasks)).unwrap())
        });
    }
    g.finish();
}

fn recon_steps(c: &mut Criterion) {
    let lm = BaseLm::init(BaseLmConfig::default(), 0).unwrap();
    let layout = lm.lora_layout(4).unwrap();
    let lib = AdapterLibrary::new((0..4).map(|i| AdapterSet::init(&layout, i).unwrap()).collect()).unwrap();
    let tasks = inputs(4);
    let cfg = TrainConfig {
        max_steps: 5,
        max_lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("recon_5_steps");
    g.sample_size(10);
    for arch in Arch::ALL {
        let net = Hypernet::build(HypernetConfig::new(arch, 64, layout.clone()), 1).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(arch), &net, |b, net| {
            b.iter(|| train_t2l_recon(net.clone(), &lib, &tasks, &cfg).unwrap().1.raw_l1)
        });
    }
    g.finish();
}

criterion_group!(benches, generate, recon_steps);
criterion_main!(benches);
