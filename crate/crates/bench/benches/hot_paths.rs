use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use railmix_core::augment::{
    apply_pipeline, cutmix, select_cut_region, AugConfig, InMemoryPartners, InMemorySources,
    SourceEntry, SourcePool,
};
use railmix_core::ingest::DomainKind;
use railmix_core::metrics::{ap40, ScoredFlag};
use railmix_core::pcgeom::{iou_3d, iou_bev, points_in_box};
use railmix_core::scenegen::{gen_scene, random_scene_spec, SceneStyle};
use railmix_core::Box3D;

fn box_pairs(n: usize) -> Vec<(Box3D, Box3D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let a = Box3D::new(
                [0.0, 0.0, 0.8],
                [4.5, 1.9, 1.6],
                rng.random_range(-3.1..3.1),
            )
            .unwrap();
            let b = Box3D::new(
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.4..1.2),
                ],
                [rng.random_range(3.5..5.0), rng.random_range(1.6..2.1), 1.5],
                rng.random_range(-3.1..3.1),
            )
            .unwrap();
            (a, b)
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let pairs = box_pairs(256);
    c.bench_function("iou_bev/256 pairs", |b| {
        b.iter(|| {
            pairs
                .iter()
                .map(|(x, y)| iou_bev(black_box(x), black_box(y)))
                .sum::<f64>()
        })
    });
    c.bench_function("iou_3d/256 pairs", |b| {
        b.iter(|| {
            pairs
                .iter()
                .map(|(x, y)| iou_3d(black_box(x), black_box(y)))
                .sum::<f64>()
        })
    });

    let frame = gen_scene(&random_scene_spec(
        3,
        "bench",
        0,
        DomainKind::RealAuto,
        SceneStyle::Surround,
        10,
        10,
        200,
    ))
    .unwrap();
    let boxes: Vec<Box3D> = frame.labels.iter().map(|l| l.bbox).collect();
    c.bench_function(
        &format!(
            "points_in_box/{} pts x {} boxes",
            frame.cloud.len(),
            boxes.len()
        ),
        |b| {
            b.iter(|| {
                boxes
                    .iter()
                    .map(|bx| points_in_box(black_box(&frame.cloud), bx).len())
                    .sum::<usize>()
            })
        },
    );
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let flags: Vec<ScoredFlag> = (0..10_000)
        .map(|_| ScoredFlag {
            score: rng.random(),
            tp: rng.random_bool(0.6),
        })
        .collect();
    c.bench_function("ap40/10k detections", |b| {
        b.iter(|| ap40(black_box(&flags), 8_000).unwrap())
    });
}

fn augmentation(c: &mut Criterion) {
    let spec = |seed, domain, style| random_scene_spec(seed, "bench", 0, domain, style, 4, 3, 100);
    let source = gen_scene(&spec(4, DomainKind::RealAuto, SceneStyle::Surround)).unwrap();
    let target = gen_scene(&spec(5, DomainKind::RealRail, SceneStyle::RailFrustum)).unwrap();
    let cfg = AugConfig::default();
    let region = select_cut_region(&source, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    c.bench_function("cutmix/fixed region", |b| {
        b.iter(|| cutmix(black_box(&source), black_box(&target), &region).unwrap())
    });

    let pool = SourcePool::new(vec![SourceEntry {
        name: "auto".into(),
        train_frames: 1,
    }])
    .unwrap();
    let sources = InMemorySources(vec![vec![source.clone()]]);
    let mut partner = target.clone();
    partner.frame_id = 1;
    partner.labels.iter_mut().for_each(|l| l.score = Some(0.9));
    let partners = InMemoryPartners(vec![partner]);
    let always = AugConfig {
        p_cutmix: 1.0,
        p_mixup: 1.0,
        ..cfg
    };
    let mut seed = 0u64;
    c.bench_function("pipeline/cutmix+mixup", |b| {
        b.iter_batched(
            || {
                seed += 1;
                ChaCha8Rng::seed_from_u64(seed)
            },
            |mut rng| {
                apply_pipeline(&target, &pool, &sources, &partners, &always, &mut rng).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, geometry, metrics, augmentation);
criterion_main!(benches);
