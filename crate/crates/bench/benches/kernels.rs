use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tumorsynth::nn::Graph;
use tumorsynth::radiomics::{extract_features, glcm_averaged};
use tumorsynth_bench::{conv_operands, denoiser_inputs, tumor_patch};

fn conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    for (c_in, c_out, n) in [(1, 8, 16), (8, 16, 8), (16, 16, 8)] {
        let (x, w, b) = conv_operands(c_in, c_out, n);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{c_in}x{c_out}@{n}")), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.conv3d(xv, wv, bv, 1, 1);
                black_box(g.value(y).data[0])
            })
        });
    }
    group.finish();
}

fn predict_noise(c: &mut Criterion) {
    let (model, z, cond) = denoiser_inputs();
    c.bench_function("predict_noise/8^3", |b| {
        b.iter(|| black_box(model.predict_noise(black_box(&z), &cond).expect("forward")))
    });
}

fn glcm(c: &mut Criterion) {
    let mut group = c.benchmark_group("radiomics");
    for n in [16, 32] {
        let (v, m) = tumor_patch(n);
        group.bench_with_input(BenchmarkId::new("glcm_averaged", n), &n, |b, _| {
            b.iter(|| black_box(glcm_averaged(&v, &m).expect("glcm")))
        });
        group.bench_with_input(BenchmarkId::new("extract_features", n), &n, |b, _| {
            b.iter(|| black_box(extract_features(&v, &m, "bench").expect("features")))
        });
    }
    group.finish();
}

criterion_group!(benches, conv3d, predict_noise, glcm);
criterion_main!(benches);
