use criterion::{black_box, criterion_group, criterion_main, Criterion};
use metaproto::numerics::{backprop, hessian_vector_product, SquaredError};
use metaproto::Matrix;
use metaproto_bench::{sine_inputs, sine_model};

fn numerics(c: &mut Criterion) {
    let model = sine_model();
    let x = sine_inputs(10);
    let loss = SquaredError::new(Matrix::from_fn(10, 1, |r, _| (r as f64).sin()));
    let v: Vec<f64> = (0..model.num_params()).map(|i| ((i % 7) as f64 - 3.0) * 1e-2).collect();

    c.bench_function("forward 10x[1,64,64,100,1]", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    c.bench_function("backprop 10x[1,64,64,100,1]", |b| {
        b.iter(|| backprop(&model, black_box(&x), &loss).unwrap())
    });
    c.bench_function("hvp 10x[1,64,64,100,1]", |b| {
        b.iter(|| hessian_vector_product(&model, black_box(&x), &loss, &v).unwrap())
    });
}

criterion_group!(benches, numerics);
criterion_main!(benches);
