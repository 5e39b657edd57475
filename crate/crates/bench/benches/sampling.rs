use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dyffusion::nets::{BackboneConfig, ConditioningMode, ForecasterModel, InterpolatorModel};
use dyffusion::rng::substream;
use dyffusion::sampling::{sample, SampleRequest, Sampler};
use dyffusion::schedule::make_schedule;
use dyffusion::Tensor;

fn bench_sampling(c: &mut Criterion) {
    let shape = [4, 4, 4];
    let h = 8;
    let backbone = BackboneConfig::default();
    let interp = InterpolatorModel::new(&shape, h, backbone, 0.15, &mut substream(0, "init"))
        .unwrap()
        .with_inference_dropout(true);
    let forecaster = ForecasterModel::new(&shape, h, backbone, ConditioningMode::Clean, 0.0, &mut substream(1, "init")).unwrap();
    let x_t = Tensor::new(shape.to_vec(), (0..64).map(|v| (v as f64 * 0.1).sin()).collect()).unwrap();

    let mut group = c.benchmark_group("cold-sample-10-members");
    for k in [0usize, 8] {
        let req = SampleRequest::new(x_t.clone(), make_schedule(h, k).unwrap(), 10, 0);
        group.bench_with_input(BenchmarkId::new("aux-steps", k), &req, |b, req| {
            b.iter(|| sample(&forecaster, &interp, req, Sampler::Cold).unwrap())
        });
    }
    group.finish();

    let req = SampleRequest::new(x_t, make_schedule(h, 0).unwrap(), 10, 0);
    c.bench_function("naive-sample-10-members", |b| b.iter(|| sample(&forecaster, &interp, &req, Sampler::Naive).unwrap()));
}

criterion_group!(benches, bench_sampling);
criterion_main!(benches);
