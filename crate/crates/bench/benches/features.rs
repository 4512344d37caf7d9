use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tensor_ols::orthopoly::decompose;
use tensor_ols::tensorize::ConvFeatureMap;
use tensor_ols::{GradedOrder, MeasureSpec, MultiplicitiesSet};
use tensor_ols_bench::{continuous_set, ramp_image};

fn featurize(c: &mut Criterion) {
    let set = continuous_set(6, 6);
    let x = [0.3, -0.2, 0.9, 0.1, -0.7, 0.5];
    let mut buf = vec![0.0; set.len()];
    c.bench_function("featurize_d6_m6", |b| {
        b.iter(|| set.featurize_into(black_box(&x), &mut buf).unwrap())
    });
}

fn conv_features(c: &mut Criterion) {
    let map = ConvFeatureMap::new(28, 28, 2);
    let img = ramp_image();
    let mut buf = vec![0.0; map.len()];
    c.bench_function("conv_pairs_28x28_r2", |b| {
        b.iter(|| map.featurize_into(black_box(&img), &mut buf).unwrap())
    });
}

fn sigma_decomposition(c: &mut Criterion) {
    let spec = MeasureSpec::discrete_uniform(vec![-1.0, 0.0, 1.0]).unwrap();
    let set = MultiplicitiesSet::build(4, 3, spec.support_cardinality(), GradedOrder::GradedDescending).unwrap();
    let mut group = c.benchmark_group("decompose");
    group.sample_size(20);
    group.bench_function("tri_d4_k3", |b| b.iter(|| decompose(black_box(&spec), &set).unwrap()));
    group.finish();
}

criterion_group!(benches, featurize, conv_features, sigma_decomposition);
criterion_main!(benches);
