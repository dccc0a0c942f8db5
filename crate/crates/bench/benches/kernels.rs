//! Hot numeric kernels: convolution forward/backward, pooling, dense.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use matchlight_core::nn::ops::{
    conv2d, conv2d_backward, conv_transpose2d, dense, maxpool2_with_argmax,
};
use matchlight_core::nn::rng::rng_for;
use matchlight_core::nn::{init, Pad, Tensor};
use rand::Rng;

fn rand_tensor(shape: &[usize], tag: u64) -> Tensor {
    let mut rng = rng_for(0xbe7c, &[tag]);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn bench_conv(c: &mut Criterion) {
    let x = rand_tensor(&[4, 16, 32, 32], 1);
    let mut rng = rng_for(0xbe7c, &[2]);
    let w = init::conv_weight(32, 16, 3, &mut rng);
    let b = Tensor::zeros(&[32]);
    c.bench_function("conv2d 4x16x32x32 -> 32ch", |bench| {
        bench.iter(|| conv2d(black_box(&x), &w, &b, 1, Pad::Same).unwrap())
    });
    let y = conv2d(&x, &w, &b, 1, Pad::Same).unwrap();
    c.bench_function("conv2d_backward 4x16x32x32 -> 32ch", |bench| {
        bench.iter(|| conv2d_backward(black_box(&x), &w, 1, Pad::Same, &y).unwrap())
    });
    let wt = init::conv_weight(16, 32, 3, &mut rng);
    let wt = Tensor::from_vec(&[16, 32, 3, 3], wt.data().to_vec());
    let bt = Tensor::zeros(&[32]);
    c.bench_function("conv_transpose2d 4x16x32x32 -> 32ch", |bench| {
        bench.iter(|| conv_transpose2d(black_box(&x), &wt, &bt, 1, Pad::Same).unwrap())
    });
}

fn bench_pool_dense(c: &mut Criterion) {
    let x = rand_tensor(&[8, 32, 32, 32], 3);
    c.bench_function("maxpool2 8x32x32x32", |bench| {
        bench.iter(|| maxpool2_with_argmax(black_box(&x)).unwrap())
    });
    let f = rand_tensor(&[64, 512], 4);
    let mut rng = rng_for(0xbe7c, &[5]);
    let w = init::dense_weight(512, 128, &mut rng);
    let b = Tensor::zeros(&[128]);
    c.bench_function("dense 64x512 -> 128", |bench| {
        bench.iter(|| dense(black_box(&f), &w, &b).unwrap())
    });
}

criterion_group!(kernels, bench_conv, bench_pool_dense);
criterion_main!(kernels);
