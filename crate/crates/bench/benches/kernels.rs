use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use voxseg::kernels::{conv3d_backward, conv3d_forward, maxpool3d_forward};
use voxseg::resample::resample_trilinear;
use voxseg::{build_model, ConvGeom, Dims, ModelConfig, Padding, Tensor, Volume};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[1, 8, 17, 32, 32]);
    let w = ramp(&[8, 8, 3, 3, 3]);
    let b = ramp(&[8]);
    let geom = ConvGeom::new([3, 3, 3], 1, Padding::Same).unwrap();
    c.bench_function("conv3d_forward 8x17x32x32 k3", |bch| {
        bch.iter(|| conv3d_forward(black_box(&x), &w, Some(&b), geom).unwrap())
    });
    let dy = ramp(&[1, 8, 17, 32, 32]);
    c.bench_function("conv3d_backward 8x17x32x32 k3", |bch| {
        bch.iter(|| conv3d_backward(black_box(&x), &w, &dy, geom, true, true).unwrap())
    });
    let x = ramp(&[1, 8, 16, 32, 32]);
    c.bench_function("maxpool3d 8x16x32x32", |bch| bch.iter(|| maxpool3d_forward(black_box(&x)).unwrap()));
}

fn model(c: &mut Criterion) {
    let mut m = build_model::<f32>(&ModelConfig::desk_m3(), 0).unwrap();
    let x = ramp(&m.input_dims(1)).map(|v| v + 0.5);
    c.bench_function("desk M3 predict 32x32x17", |bch| bch.iter(|| m.predict(black_box(&x)).unwrap()));
}

fn resample(c: &mut Criterion) {
    let v = Volume::from_fn(Dims::new(128, 128, 49), |x, y, z| ((x + 2 * y + 3 * z) % 17) as f32 / 16.0);
    c.bench_function("resample 128x128x49 -> 64x64x33", |bch| {
        bch.iter(|| resample_trilinear(black_box(&v), Dims::new(64, 64, 33)))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, model, resample
}
criterion_main!(benches);
