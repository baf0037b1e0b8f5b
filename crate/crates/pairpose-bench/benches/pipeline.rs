use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use pairpose_core::autodiff::Graph;
use pairpose_core::config::{DatasetConfig, ExperimentConfig, ModelConfig};
use pairpose_core::eval::adds_metric;
use pairpose_core::model::PoseNet;
use pairpose_core::pairing::generate_pairs;
use pairpose_core::se3::{sample_model_points, Quaternion, RigidTransform};
use pairpose_core::synth::{
    generate_dataset, make_primitive_model, render_scene, PrimitiveKind, RenderParams,
};

fn bench_adds_metric(c: &mut Criterion) {
    let model = make_primitive_model(PrimitiveKind::Blob, 0.1, 600, 3).unwrap();
    let pts = sample_model_points(&model, 500, 7).unwrap();
    let gt = RigidTransform::identity();
    let q = Quaternion::from_axis_angle([0.2, 0.5, 0.8], 0.3).unwrap();
    let pred = RigidTransform::from_quat(&q, [0.01, -0.02, 0.005]).unwrap();
    c.bench_function("adds_metric_m500", |b| {
        b.iter(|| black_box(adds_metric(black_box(&pred), black_box(&gt), black_box(&pts))))
    });
}

fn bench_render_scene(c: &mut Criterion) {
    let cfg = DatasetConfig::default();
    let model = make_primitive_model(PrimitiveKind::Box, 0.1, 600, 1).unwrap();
    let intr = cfg.camera.to_intrinsics().unwrap();
    let pose = RigidTransform::new(
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0.0, 0.0, 0.5],
    )
    .unwrap();
    let params = RenderParams::default();
    c.bench_function("render_scene_p500", |b| {
        b.iter(|| black_box(render_scene(&model, &pose, &intr, &[], &params, 42).unwrap()))
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        dataset: DatasetConfig {
            train_count: 1,
            test_count: 1,
            point_budget: 96,
            min_visible: 24,
            ..DatasetConfig::default()
        },
        model: ModelConfig::toy(),
        ..ExperimentConfig::default()
    };
    let data = generate_dataset(&cfg.dataset, 42).unwrap();
    let net = PoseNet::new(&cfg.model);
    let store = net.init_params(42, [0.0, 0.0, 0.5]).unwrap();
    let sample = &data.train[0];
    let model = data
        .models
        .iter()
        .find(|m| m.id == sample.object_id)
        .unwrap();
    let loss_pts = sample_model_points(model, 64, 5).unwrap();
    c.bench_function("train_step_sample_p96", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g, true);
            let pairs = generate_pairs(sample.point_count(), 11).unwrap();
            let fwd = net
                .forward(&mut g, &bound, sample, &data.intrinsics, model, &pairs)
                .unwrap();
            let (loss, _) = net
                .training_loss(&mut g, &fwd, sample, model, &loss_pts)
                .unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(bound.ids()[0]).unwrap()[0])
        })
    });
}

criterion_group!(benches, bench_adds_metric, bench_render_scene, bench_forward_backward);
criterion_main!(benches);
