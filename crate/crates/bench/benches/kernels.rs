use std::hint::black_box;

use chromaformer::backbone::window::{windowed_attention, Grid, WindowAttention};
use chromaformer::params::{ParamRegistry, Session};
use chromaformer::train::sample_grad;
use chromaformer::{Family, ParamStore, Tape};
use chromaformer_bench::{desk_model, filled, sdm};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (filled([n, n], 1), filled([n, n], 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (
                    t.constant(a.clone()).unwrap(),
                    t.constant(b.clone()).unwrap(),
                );
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn sdm_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("sdm_forward");
    for side in [16, 32] {
        let (module, params) = sdm(12, 16);
        let image = filled([12, side, side], 3);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |bench, _| {
            bench.iter(|| {
                let mut s = Session::new(&params, false);
                let x = s.input(image.clone()).unwrap();
                black_box(module.forward(&mut s, x, false).unwrap().o);
            })
        });
    }
    group.finish();
}

fn window_attention(c: &mut Criterion) {
    let (dim, heads, window) = (32, 4, 4);
    let mut reg = ParamRegistry::new();
    let attn = WindowAttention::declare(&mut reg, dim, heads, window, true).unwrap();
    let params: ParamStore<f32> = ParamStore::initialize(reg.specs(), 0);
    let grid = Grid::new(16, 16);
    let tokens = filled([grid.len(), dim], 4);
    let mut group = c.benchmark_group("window_attention");
    for shift in [0, 2] {
        group.bench_with_input(BenchmarkId::new("shift", shift), &shift, |bench, &shift| {
            bench.iter(|| {
                let mut s = Session::new(&params, false);
                let w = attn.bind(&mut s).unwrap();
                let x = s.input(tokens.clone()).unwrap();
                black_box(
                    windowed_attention(&mut s.tape, x, grid, window, shift, heads, &w, window)
                        .unwrap(),
                );
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let image = filled([12, 16, 16], 5);
    let labels: Vec<u8> = (0..256).map(|i| (i % 6) as u8).collect();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for family in [Family::Swin, Family::Chromaformer] {
        let (model, params) = desk_model(family, 16);
        group.bench_function(BenchmarkId::new("predict", family.as_str()), |bench| {
            bench.iter(|| black_box(model.predict(&params, &image).unwrap()))
        });
        group.bench_function(BenchmarkId::new("sample_grad", family.as_str()), |bench| {
            bench.iter(|| black_box(sample_grad(&model, &params, &image, &labels).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, sdm_forward, window_attention, model);
criterion_main!(benches);
