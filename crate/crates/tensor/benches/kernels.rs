use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stitchforge_tensor::{exec, kernels, ConvSpec, Graph, Tensor};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919 % 997) as f32 / 997.0) - 0.5).collect())
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3_forward_backward");
    let x = ramp(&[4, 8, 64, 64]);
    let w = ramp(&[16, 8, 3, 3]);
    let b = ramp(&[16]);
    for (name, seq) in modes() {
        exec::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let y = kernels::conv2d_forward(&x, &w, Some(&b), ConvSpec::SAME3);
                kernels::conv2d_backward(&x, &w, ConvSpec::SAME3, &y, true)
            })
        });
    }
    exec::set_sequential(false);
    group.finish();
}

fn pool_deconv(c: &mut Criterion) {
    let mut group = c.benchmark_group("pool_deconv_chain");
    let x = ramp(&[4, 16, 64, 64]);
    let w = ramp(&[16, 8, 2, 2]);
    let b = ramp(&[8]);
    for (name, seq) in modes() {
        exec::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone());
                let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
                let p = g.maxpool2(xv);
                let d = g.deconv2x2(p, wv, bv);
                let l = g.mean(d);
                g.backward(l)
            })
        });
    }
    exec::set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv, pool_deconv);
criterion_main!(benches);
