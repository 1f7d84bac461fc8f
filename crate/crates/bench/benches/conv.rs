use criterion::{criterion_group, criterion_main, Criterion};
use ctp4d_bench::fixture;
use ctp4d_core::conv::{conv4d, grouped_conv4d_channels};
use ctp4d_core::{AxisRole, Conv4dMode, ConvOptions, GroupSharing, KernelSpec, Padding};
use std::hint::black_box;

fn conv4d_modes(c: &mut Criterion) {
    let input = fixture(&[16, 16, 6, 8], AxisRole::defaults(4), 1);
    let kernel = KernelSpec::new(fixture(&[3, 3, 3, 3], AxisRole::defaults(4), 2));
    let mut group = c.benchmark_group("conv4d_16x16x6x8_k3");
    for (name, mode) in [("direct", Conv4dMode::Direct), ("decomposed", Conv4dMode::Decomposed)] {
        group.bench_function(name, |b| {
            b.iter(|| conv4d(black_box(&input), &kernel, mode, &ConvOptions::same()).unwrap())
        });
    }
    group.finish();
}

fn grouped_layer(c: &mut Criterion) {
    use AxisRole::*;
    let input = fixture(&[32, 32, 3, 8, 8], vec![Width, Height, Depth, Time, Channel], 3);
    let k = |seed| fixture(&[3, 3, 3, 8, 8], vec![Width, Height, Time, Channel, Filter], seed);
    let kernels = [k(4), k(5), k(6)];
    let mut group = c.benchmark_group("grouped4d_32x32x3x8_c8");
    group.sample_size(10);
    for (name, mode) in [("decomposed", Conv4dMode::Decomposed), ("direct", Conv4dMode::Direct)] {
        group.bench_function(name, |b| {
            b.iter(|| {
                grouped_conv4d_channels(black_box(&input), &kernels, GroupSharing::PerGroup, mode, Padding::Same)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv4d_modes, grouped_layer);
criterion_main!(benches);
