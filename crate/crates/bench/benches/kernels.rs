use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use diffwatch_bench::{desk_inputs, random};
use diffwatch_core::data::Label;
use diffwatch_core::numcore::{conv2d, mse, no_grad};
use diffwatch_core::scoring::roc_auc;

fn conv(c: &mut Criterion) {
    let x = random(&[8, 32, 16, 16], 1);
    let w = random(&[32, 32, 3, 3], 2).requires_grad();
    c.bench_function("conv2d_3x3_32ch_16px_forward", |b| {
        let _g = no_grad();
        b.iter(|| conv2d(black_box(&x), &w, 1, 1).unwrap())
    });
    c.bench_function("conv2d_3x3_32ch_16px_forward_backward", |b| {
        b.iter(|| {
            let y = conv2d(black_box(&x), &w, 1, 1).unwrap();
            diffwatch_core::numcore::sum(&y).backward().unwrap();
            w.zero_grad();
        })
    });
}

fn unet(c: &mut Criterion) {
    let (model, noisy, cond, ts) = desk_inputs(8);
    c.bench_function("unet_desk_forward_batch8", |b| {
        let _g = no_grad();
        b.iter(|| model.forward(black_box(&noisy), &cond, &ts).unwrap())
    });
    c.bench_function("unet_desk_forward_backward_batch8", |b| {
        b.iter(|| {
            let out = model.forward(black_box(&noisy), &cond, &ts).unwrap();
            mse(&out, &noisy).unwrap().backward().unwrap();
            model.params().tensors().iter().for_each(|p| p.zero_grad());
        })
    });
}

fn roc(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let labels: Vec<Label> = (0..n).map(|i| if (i * 31) % 5 == 0 { Label::Anomalous } else { Label::Normal }).collect();
    c.bench_function("roc_auc_10k_with_ties", |b| b.iter(|| roc_auc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, conv, unet, roc);
criterion_main!(benches);
