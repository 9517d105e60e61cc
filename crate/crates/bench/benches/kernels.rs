use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use alforge::al_loop::train_committee;
use alforge::datagen::{gen_cluster_dataset, ClassProfile, ClusterParams};
use alforge::nn::InputShape;
use alforge::tensor::{conv2d_valid, matmul};
use alforge::uncertainty::score_pool;
use alforge::{NetworkConfig, RngStream, Strategy, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = RngStream::new(seed, 0);
    Tensor::from_fn(shape, |_| r.normal())
}

fn tensor_kernels(c: &mut Criterion) {
    let a = random(&[128, 128], 1);
    let b = random(&[128, 128], 2);
    c.bench_function("matmul 128x128", |bn| bn.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));

    let x = random(&[32, 8, 16, 16], 3);
    let k = random(&[8, 8, 3, 3], 4);
    let bias = Tensor::zeros(&[8]);
    c.bench_function("conv2d 32x8x16x16 k8", |bn| {
        bn.iter(|| conv2d_valid(black_box(&x), black_box(&k), &bias).unwrap())
    });
}

fn loop_pieces(c: &mut Criterion) {
    let (train, _) = gen_cluster_dataset(
        &ClassProfile::kitti(),
        4000,
        5,
        &ClusterParams {
            feature_dim: 8,
            separation: 4.0,
            loc_coupling: 1.0,
        },
        &RngStream::new(7, 1),
    )
    .unwrap();
    let net_cfg = NetworkConfig::desk(InputShape::Flat { dim: 8 }, 5);
    let labeled: Vec<usize> = (0..500).collect();
    let batch = train.gather(&labeled);
    let s = RngStream::new(7, 2);

    let mut g = c.benchmark_group("loop");
    g.sample_size(10);
    g.bench_function("train desk net on 500", |bn| {
        bn.iter(|| train_committee(Strategy::SoftmaxEntropy, &net_cfg, &batch, 1, &s).unwrap())
    });
    let committee = train_committee(Strategy::EnsEntropy, &net_cfg, &batch, 5, &s).unwrap();
    let single = train_committee(Strategy::McMi, &net_cfg, &batch, 1, &s).unwrap();
    let ids: Vec<usize> = (500..4000).collect();
    let x = train.features().select_rows(&ids);
    g.bench_function("score 3500 ens-entropy E=5", |bn| {
        bn.iter(|| score_pool(Strategy::EnsEntropy, &committee, &x, &ids, 20, &s).unwrap())
    });
    g.bench_function("score 3500 mc-mi T=20", |bn| {
        bn.iter(|| score_pool(Strategy::McMi, &single, &x, &ids, 20, &s).unwrap())
    });
    g.finish();
}

criterion_group!(benches, tensor_kernels, loop_pieces);
criterion_main!(benches);
