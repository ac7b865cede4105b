use criterion::{black_box, criterion_group, criterion_main, Criterion};

use densedet_core::assignment::{ams_labels, pred_iou_map};
use densedet_core::data::{generate, generate_scene};
use densedet_core::eval::extract_detections;
use densedet_core::train::{fit_anchors, train_iteration, RunState};
use densedet_core::{assign_ao, build_grid, compute_pono, iou, BBox, Dataset, GenSpec, Model, Offsets, TrainConfig};

fn geometry(c: &mut Criterion) {
    let boxes: Vec<BBox> = (0..64)
        .map(|i| BBox::new((i % 8) as f64 * 7.0, (i / 8) as f64 * 7.0, 6.0 + (i % 5) as f64, 9.0))
        .collect();
    c.bench_function("iou_64x64", |b| {
        b.iter(|| {
            let mut s = 0.0;
            for a in &boxes {
                for o in &boxes {
                    s += iou(black_box(a), black_box(o));
                }
            }
            s
        })
    });
}

fn assignment(c: &mut Criterion) {
    let spec = GenSpec::default();
    let ds = Dataset {
        n_classes: spec.n_classes,
        scenes: generate(&spec, 50).unwrap(),
    };
    let anchors = fit_anchors(&ds, 3, 0, 50).unwrap();
    let grid = build_grid(&anchors, 8, 8, 8).unwrap();
    let scene = generate_scene(&spec, 7).unwrap();
    let zero = vec![Offsets::default(); grid.cells().len()];

    c.bench_function("assign_pono_ams", |b| {
        b.iter(|| {
            let asg = assign_ao(&grid, black_box(&scene.gt));
            let o = compute_pono(&grid, &scene.gt, &asg);
            let o_hat = pred_iou_map(&grid, &zero, &scene.gt, &asg).unwrap();
            ams_labels(&o, &o_hat, 0.5).unwrap()
        })
    });
}

fn network(c: &mut Criterion) {
    let spec = GenSpec::default();
    let scenes = generate(&spec, 8).unwrap();
    let ds = Dataset {
        n_classes: spec.n_classes,
        scenes: scenes.clone(),
    };
    let cfg = TrainConfig::default();
    let anchors = fit_anchors(&ds, cfg.n_anchors, 0, 50).unwrap();
    let grid = build_grid(&anchors, 8, 8, 8).unwrap();
    let k = anchors.n_classes() * anchors.n_anchors();
    let model = Model::toynet(cfg.net, k, 0).unwrap();

    c.bench_function("toynet_predict", |b| {
        b.iter(|| model.predict(black_box(&scenes[0].image)).unwrap())
    });

    let out = model.predict(&scenes[0].image).unwrap();
    c.bench_function("extract_detections", |b| {
        b.iter(|| extract_detections(black_box(&out), &grid, 0.0, 0.5).unwrap())
    });

    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("iteration_batch4", |b| {
        let mut state = RunState::new(model.clone(), anchors.n_classes(), anchors.n_anchors(), 1.0, 0);
        b.iter(|| train_iteration(&mut state, &scenes[..4], &cfg, &grid).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, assignment, network);
criterion_main!(benches);
