use blg_core::dataset::synthesize_pairs;
use blg_core::generator::{assemble_input, build_generator, generator_forward, GeneratorConfig};
use blg_core::kernels::{conv2d_forward, conv2d_weight_grad, ConvSpec};
use blg_core::parallel;
use blg_core::tensor::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", true), ("parallel", false)]
}

fn conv(c: &mut Criterion) {
    let x = Tensor::from_fn([2, 32, 64, 64], |[n, ch, y, x]| ((n + ch * 7 + y * 3 + x) % 17) as f64 / 17.0);
    let w = Tensor::from_fn([32, 32, 3, 3], |[o, i, y, x]| ((o * 5 + i + y + x) % 11) as f64 / 11.0 - 0.5);
    let spec = ConvSpec::new(1, 1, 1);
    let y = conv2d_forward(&x, &w, None, spec);
    let mut group = c.benchmark_group("conv3x3_32ch_64px");
    for (name, seq) in modes() {
        parallel::set_sequential(seq);
        group.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| conv2d_forward(&x, &w, None, spec)));
        group.bench_function(BenchmarkId::new("weight_grad", name), |b| {
            b.iter(|| conv2d_weight_grad(&x, &y, spec, w.shape()))
        });
    }
    parallel::set_sequential(false);
    group.finish();
}

fn generator(c: &mut Criterion) {
    let p = build_generator(&GeneratorConfig::with_width(8), 0).unwrap();
    let pair = &synthesize_pairs(1, (64, 64), 0).unwrap()[0];
    let x = assemble_input(&pair.input, &pair.mask).unwrap();
    let mut group = c.benchmark_group("generator_w8_64px");
    group.sample_size(20);
    for (name, seq) in modes() {
        parallel::set_sequential(seq);
        group.bench_function(name, |b| b.iter(|| generator_forward(&p, &x).unwrap()));
    }
    parallel::set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv, generator);
criterion_main!(benches);
