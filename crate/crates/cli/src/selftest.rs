//! Oracle agreement checks, runnable from the command line and reused by the
//! acceptance suite at full scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use railmix_core::ingest::{assign_splits_batch10, Split};
use railmix_core::metrics::{ap40, match_detections, Detection, IouMode, ScoredFlag};
use railmix_core::pcgeom::{iou_3d, iou_bev};
use railmix_core::scenegen::{exhaustive_ap, exhaustive_match, mc_iou_bev, voxel_iou_3d};
use railmix_core::{Box3D, LabeledBox, ObjectClass};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed deviation from the oracle.
    pub max_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    fn from_cases(name: &str, cases: Vec<(f64, Option<String>)>) -> Self {
        let failures = cases.iter().filter(|c| c.1.is_some()).count();
        Self {
            name: name.to_string(),
            cases: cases.len(),
            failures,
            max_error: cases.iter().map(|c| c.0).fold(0.0, f64::max),
            first_failure: cases.into_iter().find_map(|c| c.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestSummary {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn case_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index as u64);
    rng
}

/// A box of plausible object size with arbitrary yaw.
pub fn random_box<R: Rng>(rng: &mut R, spread: f64) -> Box3D {
    let car = rng.random_bool(0.6);
    let dims = if car {
        [
            rng.random_range(3.5..5.0),
            rng.random_range(1.6..2.1),
            rng.random_range(1.3..1.9),
        ]
    } else {
        [
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..0.9),
            rng.random_range(1.5..1.9),
        ]
    };
    Box3D::new(
        [
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-0.3..1.3),
        ],
        dims,
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .expect("valid random box")
}

/// A second box near `a` so that most pairs overlap.
pub fn nearby_box<R: Rng>(rng: &mut R, a: &Box3D) -> Box3D {
    let c = a.center();
    let d = a.dims();
    let scale = |v: f64, rng: &mut R| v * rng.random_range(0.6..1.4);
    Box3D::new(
        [
            c[0] + rng.random_range(-0.6..0.6) * d[0],
            c[1] + rng.random_range(-0.6..0.6) * d[0],
            c[2] + rng.random_range(-0.4..0.4) * d[2],
        ],
        [scale(d[0], rng), scale(d[1], rng), scale(d[2], rng)],
        a.yaw() + rng.random_range(-1.0..1.0),
    )
    .expect("valid nearby box")
}

/// Rotated BEV IoU against Monte-Carlo, tolerance `max(1e-3, 4 SE)`.
pub fn check_bev_vs_mc(pairs: usize, samples: usize, seed: u64) -> CheckResult {
    let cases = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = case_rng(seed, 1, i);
            let a = random_box(&mut rng, 20.0);
            let b = nearby_box(&mut rng, &a);
            let exact = iou_bev(&a, &b);
            let mc = match mc_iou_bev(&a, &b, samples, &mut rng) {
                Ok(mc) => mc,
                Err(e) => return (f64::INFINITY, Some(e.to_string())),
            };
            let err = (exact - mc.value).abs();
            let tol = f64::max(1e-3, 4.0 * mc.std_err);
            let fail = (err > tol)
                .then(|| format!("pair {i}: exact {exact} vs mc {} (tol {tol})", mc.value));
            (err, fail)
        })
        .collect();
    CheckResult::from_cases("iou_bev_vs_monte_carlo", cases)
}

/// Axis-aligned pairs (yaw 0 or a right angle) against the closed-form
/// rectangle overlap, tolerance `1e-12`.
pub fn check_bev_axis_aligned(pairs: usize, seed: u64) -> CheckResult {
    let cases = (0..pairs)
        .map(|i| {
            let mut rng = case_rng(seed, 2, i);
            let quarter = |rng: &mut ChaCha8Rng| {
                f64::from(rng.random_range(0..2u8)) * std::f64::consts::FRAC_PI_2
            };
            let make = |rng: &mut ChaCha8Rng| {
                let c = [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    0.0,
                ];
                let d = [rng.random_range(0.5..5.0), rng.random_range(0.5..5.0), 1.0];
                (Box3D::new(c, d, quarter(rng)).expect("valid box"), c, d)
            };
            let (a, ca, da) = make(&mut rng);
            let (b, cb, db) = make(&mut rng);
            // Extents along x and y after the quarter turn.
            let ext = |bx: &Box3D, d: [f64; 3]| {
                if bx.yaw() == 0.0 {
                    [d[0], d[1]]
                } else {
                    [d[1], d[0]]
                }
            };
            let (ea, eb) = (ext(&a, da), ext(&b, db));
            let overlap = |k: usize| {
                let lo = (ca[k] - ea[k] / 2.0).max(cb[k] - eb[k] / 2.0);
                let hi = (ca[k] + ea[k] / 2.0).min(cb[k] + eb[k] / 2.0);
                (hi - lo).max(0.0)
            };
            let inter = overlap(0) * overlap(1);
            let expect = inter / (ea[0] * ea[1] + eb[0] * eb[1] - inter);
            let err = (iou_bev(&a, &b) - expect).abs();
            let fail = (err > 1e-12).then(|| format!("pair {i}: error {err:e}"));
            (err, fail)
        })
        .collect();
    CheckResult::from_cases("iou_bev_axis_aligned_closed_form", cases)
}

/// 3D IoU against voxel counting at `cell`, absolute tolerance `tol`.
pub fn check_3d_vs_voxel(pairs: usize, cell: f64, tol: f64, seed: u64) -> CheckResult {
    let cases = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = case_rng(seed, 3, i);
            let a = random_box(&mut rng, 20.0);
            let b = nearby_box(&mut rng, &a);
            let exact = iou_3d(&a, &b);
            match voxel_iou_3d(&a, &b, cell) {
                Ok(v) => {
                    let err = (exact - v).abs();
                    (
                        err,
                        (err > tol).then(|| format!("pair {i}: exact {exact} vs voxel {v}")),
                    )
                }
                Err(e) => (f64::INFINITY, Some(e.to_string())),
            }
        })
        .collect();
    CheckResult::from_cases("iou_3d_vs_voxel", cases)
}

/// A random detection instance of at most `max_dets` detections.
pub fn random_instance<R: Rng>(rng: &mut R, max_dets: usize) -> (Vec<Detection>, Vec<LabeledBox>) {
    let n_gt = rng.random_range(1..=12);
    let gts: Vec<LabeledBox> = (0..n_gt)
        .map(|_| {
            let class = if rng.random_bool(0.7) {
                ObjectClass::Car
            } else {
                ObjectClass::Pedestrian
            };
            LabeledBox::ground_truth(random_box(rng, 15.0), class)
        })
        .collect();
    let n_det = rng.random_range(0..=max_dets);
    let dets = (0..n_det)
        .map(|_| {
            let (bbox, class) = if rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                (nearby_box(rng, &g.bbox), g.class)
            } else {
                (
                    random_box(rng, 15.0),
                    if rng.random_bool(0.5) {
                        ObjectClass::Car
                    } else {
                        ObjectClass::Pedestrian
                    },
                )
            };
            // Coarse scores produce ties.
            let score = f64::from(rng.random_range(0..25u8)) / 24.0;
            Detection { bbox, class, score }
        })
        .collect();
    (dets, gts)
}

/// `ap40` after greedy matching against the exhaustive reference, to 1e-9.
pub fn check_ap40_vs_exhaustive(instances: usize, seed: u64) -> CheckResult {
    let cases = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = case_rng(seed, 4, i);
            let (dets, gts) = random_instance(&mut rng, 50);
            let (mode, threshold) = [
                (IouMode::Bev, 0.7),
                (IouMode::Full3D, 0.5),
                (IouMode::Bev, 0.25),
            ][i % 3];
            let iou = |a: &Box3D, b: &Box3D| mode.iou(a, b);
            let m = match_detections(&dets, &gts, iou, threshold);
            let flags: Vec<ScoredFlag> = dets
                .iter()
                .zip(&m.det_tp)
                .map(|(d, &tp)| ScoredFlag { score: d.score, tp })
                .collect();
            let fast = ap40(&flags, gts.len());
            let slow = exhaustive_ap(&dets, &gts, threshold, iou);
            match (fast, slow) {
                (Ok(f), Ok(Some(s))) => {
                    let err = (f - s).abs();
                    (
                        err,
                        (err > 1e-9).then(|| format!("instance {i}: {f} vs {s}")),
                    )
                }
                (f, s) => (f64::INFINITY, Some(format!("instance {i}: {f:?} vs {s:?}"))),
            }
        })
        .collect();
    CheckResult::from_cases("ap40_vs_exhaustive", cases)
}

/// Greedy matching flags against the exhaustive reference.
pub fn check_matching_vs_exhaustive(instances: usize, seed: u64) -> CheckResult {
    let cases = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = case_rng(seed, 5, i);
            let (dets, gts) = random_instance(&mut rng, 20);
            let fast = match_detections(&dets, &gts, iou_3d, 0.3).det_tp;
            let slow = exhaustive_match(&dets, &gts, 0.3, iou_3d);
            let bad = fast.iter().zip(&slow).filter(|(a, b)| a != b).count();
            (
                bad as f64,
                (bad > 0).then(|| format!("instance {i}: {bad} flag(s) differ")),
            )
        })
        .collect();
    CheckResult::from_cases("matching_vs_exhaustive", cases)
}

/// Split counts of `n` consecutive frames against the 7/2/1 ratio.
pub fn check_split_rule(n: usize) -> CheckResult {
    let splits = assign_splits_batch10(n);
    let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
    let got = [count(Split::Train), count(Split::Val), count(Split::Test)];
    let want = [n / 10 * 7, n / 10 * 2, n / 10];
    let ok = !n.is_multiple_of(10) || got == want;
    CheckResult::from_cases(
        "split_rule",
        vec![(0.0, (!ok).then(|| format!("{got:?} != {want:?}")))],
    )
}

/// Run every check at a scale set by `samples`.
pub fn cmd_selftest(samples: usize, seed: u64) -> SelftestSummary {
    let n = samples.max(1);
    let checks = vec![
        check_bev_vs_mc(n, 100_000, seed),
        check_bev_axis_aligned(n, seed),
        check_3d_vs_voxel(n.div_ceil(20), 0.01, 2e-3, seed),
        check_ap40_vs_exhaustive(n, seed),
        check_matching_vs_exhaustive(n, seed),
        check_split_rule(1000),
    ];
    SelftestSummary {
        seed,
        passed: checks.iter().all(CheckResult::passed),
        checks,
    }
}
