use proptest::prelude::*;
use rand::SeedableRng;

use railmix_core::augment::{
    apply_pipeline, cutmix, frame_rng, pointmixup, select_cut_region, AugConfig, AugRng,
    CutMixStatus, InMemoryPartners, InMemorySources, SourceEntry, SourcePool, TAG_PARTNER,
    TAG_TARGET,
};
use railmix_core::ingest::DomainKind;
use railmix_core::scenegen::{gen_scene, random_scene_spec, SceneStyle};
use railmix_core::Frame;

fn scene(seed: u64, domain: DomainKind, style: SceneStyle, id: u64) -> Frame {
    gen_scene(&random_scene_spec(seed, "s", id, domain, style, 3, 2, 25)).unwrap()
}

fn scored(mut f: Frame, score: f64) -> Frame {
    for l in &mut f.labels {
        l.score = Some(score);
    }
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cutmix_invariants(seed in any::<u64>()) {
        let source = scene(seed, DomainKind::RealAuto, SceneStyle::Surround, 0);
        let target = scene(seed.wrapping_add(1), DomainKind::RealRail, SceneStyle::RailFrustum, 1);
        let mut rng = AugRng::seed_from_u64(seed);
        let region = select_cut_region(&source, &AugConfig::default(), &mut rng).unwrap();
        prop_assert!(source.labels.iter().any(|l| region.contains(l.bbox.center()[0], l.bbox.center()[1])));
        let out = cutmix(&source, &target, &region).unwrap();
        let f = &out.frame;
        prop_assert_eq!(f.cloud.len(), out.kept_target_points.len() + out.cut_source_points.len());
        prop_assert!(f.cloud.len() <= target.cloud.len() + source.cloud.len());
        prop_assert_eq!(f.domain, target.domain);
        let split = out.kept_target_points.len();
        for (k, p) in f.cloud.xyz().iter().enumerate() {
            prop_assert_eq!(k >= split, out.footprint.contains(p[0], p[1]));
        }
        let lsplit = out.kept_target_labels.len();
        for (k, l) in f.labels.iter().enumerate() {
            let c = l.bbox.center();
            prop_assert_eq!(k >= lsplit, out.footprint.contains(c[0], c[1]));
        }
        // Pasted points are rigid horizontal shifts of their source points.
        for (k, &i) in out.cut_source_points.iter().enumerate() {
            let s = source.cloud.xyz()[i];
            let p = f.cloud.xyz()[split + k];
            prop_assert_eq!(p, [s[0] + out.translation[0], s[1] + out.translation[1], s[2]]);
        }
    }

    #[test]
    fn mixup_never_invents_labels(seed in any::<u64>()) {
        let a = scene(seed, DomainKind::RealRail, SceneStyle::RailFrustum, 0);
        let b = scored(scene(seed ^ 0xabc, DomainKind::RealRail, SceneStyle::RailFrustum, 1), 0.9);
        let mut rng = AugRng::seed_from_u64(seed);
        let out = pointmixup(&a, &b, &AugConfig::default(), &mut rng).unwrap();
        prop_assert_eq!(&out.frame.labels[..a.labels.len()], &a.labels[..]);
        for l in &out.frame.labels[a.labels.len()..] {
            prop_assert!(b.labels.contains(l));
        }
        prop_assert!(out.frame.cloud.len() <= a.cloud.len() + b.cloud.len());
    }
}

fn fixtures() -> (Vec<Frame>, SourcePool, InMemorySources, InMemoryPartners) {
    let targets: Vec<Frame> = (0..20)
        .map(|i| scene(100 + i, DomainKind::RealRail, SceneStyle::RailFrustum, i))
        .collect();
    let src_a: Vec<Frame> = (0..5)
        .map(|i| {
            scene(
                200 + i,
                DomainKind::SyntheticRail,
                SceneStyle::RailFrustum,
                i,
            )
        })
        .collect();
    let src_b: Vec<Frame> = (0..5)
        .map(|i| scene(300 + i, DomainKind::RealAuto, SceneStyle::Surround, i))
        .collect();
    let pool = SourcePool::new(vec![
        SourceEntry {
            name: "a".into(),
            train_frames: 5,
        },
        SourceEntry {
            name: "b".into(),
            train_frames: 5,
        },
    ])
    .unwrap();
    let partners = targets.iter().cloned().map(|f| scored(f, 0.7)).collect();
    (
        targets,
        pool,
        InMemorySources(vec![src_a, src_b]),
        InMemoryPartners(partners),
    )
}

#[test]
fn zero_probabilities_are_identity() {
    let (targets, pool, sources, partners) = fixtures();
    let cfg = AugConfig {
        p_cutmix: 0.0,
        p_mixup: 0.0,
        ..Default::default()
    };
    for t in &targets {
        let out = apply_pipeline(
            t,
            &pool,
            &sources,
            &partners,
            &cfg,
            &mut frame_rng(5, &t.sequence_id, t.frame_id),
        )
        .unwrap();
        assert_eq!(&out.frame, t);
        assert!(out.provenance.points.iter().all(|&p| p == TAG_TARGET));
    }
}

#[test]
fn pipeline_is_deterministic_and_tags_provenance() {
    let (targets, pool, sources, partners) = fixtures();
    let cfg = AugConfig {
        p_cutmix: 1.0,
        p_mixup: 1.0,
        ..Default::default()
    };
    for t in &targets {
        let run = || {
            apply_pipeline(
                t,
                &pool,
                &sources,
                &partners,
                &cfg,
                &mut frame_rng(9, &t.sequence_id, t.frame_id),
            )
            .unwrap()
        };
        let (x, y) = (run(), run());
        assert_eq!(x, y);
        assert_eq!(x.provenance.points.len(), x.frame.cloud.len());
        assert_eq!(x.provenance.labels.len(), x.frame.labels.len());
        if let CutMixStatus::Applied { source, .. } = x.cutmix {
            let tag = source as u8 + 1;
            assert!(x.provenance.labels.contains(&tag));
        }
        assert!(x
            .provenance
            .points
            .iter()
            .all(|&p| p == TAG_TARGET || p == 1 || p == 2 || p == TAG_PARTNER));
    }
}
