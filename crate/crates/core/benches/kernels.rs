//! Kernel throughput on one thread against the default rayon pool.
//!
//! Build with `--no-default-features` to time the sequential fallback; both
//! groups then run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dress::csr::build;
use dress::infer::{spmm, SparseExecPlan};
use dress::linalg::{gemm, Mat};
use dress::net::graph::predict;
use dress::net::params::ParamStore;
use dress::net::spec::NetworkSpec;
use dress::sampling::{allocate_layerwise, sample_masks};
use dress::Tensor;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("1-thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn input(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn kernels(c: &mut Criterion) {
    let net = NetworkSpec::resnet20();
    let params = ParamStore::<f32>::init(&net, 0).unwrap();
    let levels = [0.5, 0.8, 0.9];
    let ladder = allocate_layerwise(&net, &params, &levels).unwrap();
    let masks = sample_masks(&net, &params, &ladder).unwrap();
    let model = build(&net, &params, &masks, &levels, vec![params.bn_state(); 3]).unwrap();
    let x = input(&[32, 3, 32, 32]);

    let (m, k, n) = (256, 576, 1024);
    let a: Vec<f32> = (0..m * k).map(|i| (i % 13) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 * 0.1).collect();
    let last = model.layers.iter().rposition(|l| l.rows == 64 && l.row_len == 576).unwrap();
    let sub = model.layers[last].extract(3).unwrap();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("gemm-256x576x1024", name), |bch| {
            let mut out = vec![0.0f32; m * n];
            bch.iter(|| pool.install(|| gemm(1.0, Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut out)))
        });
        g.bench_function(BenchmarkId::new("spmm-level3", name), |bch| {
            let mut out = vec![0.0f32; sub.rows * n];
            bch.iter(|| pool.install(|| spmm(&sub, &b, n, &mut out).unwrap()))
        });
        g.bench_function(BenchmarkId::new("dense-forward-resnet20", name), |bch| {
            bch.iter(|| pool.install(|| predict(&net, &params, None, &x).unwrap()))
        });
        for level in [1, 3] {
            let plan = SparseExecPlan::new(&model, level).unwrap();
            g.bench_function(BenchmarkId::new(format!("sparse-forward-resnet20-k{}", level), name), |bch| {
                bch.iter(|| pool.install(|| plan.infer(&x).unwrap()))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
