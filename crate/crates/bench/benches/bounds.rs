use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lipcert::certify::certify_dataset;
use lipcert::crmtrain::{loss_gradient, CrmConfig};
use lipcert::linop::{power_iteration, spectral_norm, Conv2d, LinOp, Matrix, PowerIterConfig};
use lipcert::liplt::{liplt_multi, naive_bound, pairwise_lipschitz, sampled_lower_bound, BoundMethod, PairwiseMode};
use lipcert::netgraph::{gen_two_moons, ActivationSector, ResidualChain};
use lipcert::rng::{stream_rng, Stream};
use rand::Rng;

fn spectral(c: &mut Criterion) {
    let mut rng = stream_rng(1, Stream::Sampling);
    let mut g = c.benchmark_group("spectral_norm");
    let dense = LinOp::dense(Matrix::from_fn(128, 96, |_, _| rng.random::<f64>() - 0.5));
    g.bench_function("dense_128x96", |b| b.iter(|| spectral_norm(black_box(&dense), &PowerIterConfig::default())));
    let kernel = (0..3 * 3 * 9).map(|_| rng.random::<f64>() - 0.5).collect();
    let conv = LinOp::Conv2d(Arc::new(Conv2d::new(3, 3, (3, 3), 1, 1, (16, 16), kernel).unwrap()));
    g.bench_function("conv_3x3x16x16", |b| b.iter(|| spectral_norm(black_box(&conv), &PowerIterConfig::default())));
    let warm = power_iteration(&dense, &PowerIterConfig::default(), None).unwrap().v;
    g.bench_function("dense_warm_10_iters", |b| {
        b.iter(|| power_iteration(black_box(&dense), &PowerIterConfig::training(), Some(&warm)))
    });
    g.finish();
}

fn network_bounds(c: &mut Criterion) {
    let mut g = c.benchmark_group("network_bound");
    let cfg = PowerIterConfig::default();
    for depth in [2, 4, 6] {
        let mut rng = stream_rng(depth as u64, Stream::Init);
        let chain = ResidualChain::random_residual(32, 64, 64, depth, 10, &mut rng).unwrap();
        g.bench_with_input(BenchmarkId::new("naive", depth), &chain, |b, ch| b.iter(|| naive_bound(ch, &cfg)));
        g.bench_with_input(BenchmarkId::new("liplt", depth), &chain, |b, ch| b.iter(|| liplt_multi(ch, &cfg)));
    }
    g.finish();

    let mut g = c.benchmark_group("pairwise");
    g.sample_size(10);
    let chain = ResidualChain::init_mlp(&[784, 64, 64, 10], ActivationSector::relu(), 0).unwrap();
    for mode in PairwiseMode::ALL {
        g.bench_function(mode.to_string(), |b| b.iter(|| pairwise_lipschitz(&chain, mode, &BoundMethod::Liplt, &cfg)));
    }
    g.bench_function("sampled_lower_1000", |b| b.iter(|| sampled_lower_bound(&chain, 1000, 0)));
    g.finish();
}

fn certify_and_train(c: &mut Criterion) {
    let chain = ResidualChain::init_mlp(&[2, 16, 16, 2], ActivationSector::relu(), 0).unwrap();
    let data = gen_two_moons(500, 0.1, 0).unwrap();
    let mut g = c.benchmark_group("workflow");
    g.bench_function("certify_moons_500", |b| {
        b.iter(|| {
            certify_dataset(&chain, &data, 0.1, 10.0, PairwiseMode::Direct, &BoundMethod::Liplt, &PowerIterConfig::default())
        })
    });
    let batch = data.take(64);
    let mut cfg = CrmConfig::new(0.1);
    cfg.lambda = 0.1;
    g.bench_function("crm_gradient_batch_64", |b| b.iter(|| loss_gradient(&chain, &batch, &cfg)));
    g.finish();
}

criterion_group!(benches, spectral, network_bounds, certify_and_train);
criterion_main!(benches);
