//! Deterministic synthetic scenes and brute-force reference oracles.
//!
//! The oracles here deliberately share no geometry or metric code with
//! [`crate::pcgeom`] or [`crate::metrics`]: box membership is recomputed from
//! the box axes, AP is recomputed from the precision/recall definition.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::Frame;
use crate::ingest::{
    assign_splits_batch10, Dataset, DatasetManifest, DomainKind, FrameRecord, IngestError,
    IntensityMode, PointRecord,
};
use crate::metrics::Detection;
use crate::pcgeom::{Box3D, GeomError, LabeledBox, ObjectClass, PointCloud};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("Monte-Carlo oracle needs at least 100000 samples, got {0}")]
    TooFewSamples(usize),
    #[error("voxel oracle cell must be in (0, 0.05] m, got {0}")]
    BadCell(f64),
    #[error("exhaustive AP is limited to 50 detections, got {0}")]
    TooManyDetections(usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Round to the nearest `f32` so generated data survives the cloud format
/// unchanged.
fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub class: ObjectClass,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub sequence_id: String,
    pub frame_id: u64,
    pub domain: DomainKind,
    /// Forward ground extent in meters; the ground spans `[-extent, extent]`
    /// on both axes before frustum clipping.
    pub ground_extent: f64,
    /// Ground points per square meter.
    pub ground_density: f64,
    pub frustum_half_angle_deg: f64,
    pub objects: Vec<ObjectPlacement>,
    /// Standard deviation of ground z jitter, meters.
    pub noise_sigma: f64,
    /// Emit a uniform `[0, 1]` intensity channel.
    #[serde(default)]
    pub with_intensity: bool,
}

/// Area of `[-e, e]^2` within `half_angle` of the +x axis.
pub fn wedge_area(extent: f64, half_angle_deg: f64) -> f64 {
    let t = half_angle_deg.to_radians();
    let e2 = extent * extent;
    // Upper half, swept from +x through +y to -x.
    let half = if t <= PI / 4.0 {
        0.5 * e2 * t.tan()
    } else if t <= 3.0 * PI / 4.0 {
        0.5 * e2 + 0.5 * e2 * (1.0 - 1.0 / t.tan())
    } else {
        1.5 * e2 + 0.5 * e2 * (1.0 - (PI - t).tan())
    };
    2.0 * half
}

fn in_wedge(x: f64, y: f64, half_angle_rad: f64) -> bool {
    y.atan2(x).abs() <= half_angle_rad
}

impl SceneSpec {
    pub fn ground_point_count(&self) -> usize {
        (self.ground_density * wedge_area(self.ground_extent, self.frustum_half_angle_deg)).floor()
            as usize
    }

    fn validate(&self) -> Result<Vec<Box3D>, SceneError> {
        let bad = |m: String| Err(SceneError::BadSpec(m));
        if !(self.ground_density > 0.0 && self.ground_density.is_finite()) {
            return bad(format!(
                "ground density {} must be positive",
                self.ground_density
            ));
        }
        if !(self.ground_extent > 0.0 && self.ground_extent.is_finite()) {
            return bad(format!(
                "ground extent {} must be positive",
                self.ground_extent
            ));
        }
        if !(self.frustum_half_angle_deg > 0.0 && self.frustum_half_angle_deg <= 180.0) {
            return bad(format!(
                "half-angle {} outside (0, 180]",
                self.frustum_half_angle_deg
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma {} must be non-negative",
                self.noise_sigma
            ));
        }
        let half = self.frustum_half_angle_deg.to_radians();
        let mut boxes = Vec::with_capacity(self.objects.len());
        for (i, o) in self.objects.iter().enumerate() {
            let b = Box3D::new(o.center, o.dims, o.yaw)?;
            if o.points > 0 {
                let (s, c) = o.yaw.sin_cos();
                for (u, v) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
                    let lx = 0.5 * u * o.dims[0];
                    let ly = 0.5 * v * o.dims[1];
                    let x = o.center[0] + c * lx - s * ly;
                    let y = o.center[1] + s * lx + c * ly;
                    if !in_wedge(x, y, half) {
                        return bad(format!("object {i} extends outside the frustum"));
                    }
                }
            }
            boxes.push(b);
        }
        Ok(boxes)
    }
}

/// Membership in a yaw-oriented box, computed from the box axes.
fn inside_oriented(p: [f64; 3], o: &ObjectPlacement) -> bool {
    let (s, c) = o.yaw.sin_cos();
    let d = [p[0] - o.center[0], p[1] - o.center[1]];
    (d[0] * c + d[1] * s).abs() <= 0.5 * o.dims[0]
        && (-d[0] * s + d[1] * c).abs() <= 0.5 * o.dims[1]
        && (p[2] - o.center[2]).abs() <= 0.5 * o.dims[2]
}

/// Generate one frame.
///
/// Ground points are uniform over the frustum-clipped ground square with
/// Gaussian z jitter; ground samples that land inside an object box are
/// redrawn, so every object box holds exactly its configured point count
/// (for non-overlapping boxes). Labels are the placed boxes, ground truth.
pub fn gen_scene(spec: &SceneSpec) -> Result<Frame, SceneError> {
    let boxes = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| SceneError::BadSpec(e.to_string()))?;
    let half = spec.frustum_half_angle_deg.to_radians();
    let e = spec.ground_extent;
    let x_lo = if half <= PI / 2.0 { 0.0 } else { -e };
    let y_hi = if half >= PI / 4.0 { e } else { e * half.tan() };

    let n_ground = spec.ground_point_count();
    let mut xyz =
        Vec::with_capacity(n_ground + spec.objects.iter().map(|o| o.points).sum::<usize>());
    while xyz.len() < n_ground {
        let x = f32r(rng.random_range(x_lo..=e));
        let y = f32r(rng.random_range(-y_hi..=y_hi));
        if !in_wedge(x, y, half) {
            continue;
        }
        let z = f32r(noise.sample(&mut rng));
        let p = [x, y, z];
        if spec.objects.iter().any(|o| inside_oriented(p, o)) {
            continue;
        }
        xyz.push(p);
    }
    for o in &spec.objects {
        let (s, c) = o.yaw.sin_cos();
        // Margin keeps f32 rounding from pushing a point across a face.
        let h = o.dims.map(|d| 0.49 * d);
        for _ in 0..o.points {
            let lx = rng.random_range(-h[0]..=h[0]);
            let ly = rng.random_range(-h[1]..=h[1]);
            let lz = rng.random_range(-h[2]..=h[2]);
            xyz.push([
                f32r(o.center[0] + c * lx - s * ly),
                f32r(o.center[1] + s * lx + c * ly),
                f32r(o.center[2] + lz),
            ]);
        }
    }
    let intensity = spec
        .with_intensity
        .then(|| (0..xyz.len()).map(|_| f32r(rng.random::<f64>())).collect());
    let cloud = PointCloud::from_parts(xyz, intensity, None)?;
    let labels = spec
        .objects
        .iter()
        .zip(boxes)
        .map(|(o, b)| LabeledBox::ground_truth(b, o.class))
        .collect();
    Ok(Frame::new(
        cloud,
        labels,
        spec.domain,
        spec.sequence_id.clone(),
        spec.frame_id,
    ))
}

/// Which kind of sensor setup a generated scene imitates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SceneStyle {
    /// Narrow 15 degree forward frustum, long range.
    RailFrustum,
    /// Full 360 degree scan, shorter range.
    Surround,
}

/// A plausible random scene with `cars` cars and `pedestrians` pedestrians,
/// each carrying `points_per_object` points. Objects are placed on a
/// non-overlapping grid so their point counts are exact.
#[allow(clippy::too_many_arguments)]
pub fn random_scene_spec(
    seed: u64,
    sequence_id: &str,
    frame_id: u64,
    domain: DomainKind,
    style: SceneStyle,
    cars: usize,
    pedestrians: usize,
    points_per_object: usize,
) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_ce0e);
    let (half_angle, extent, density, slot_len) = match style {
        SceneStyle::RailFrustum => (7.5, 200.0, 0.05, 12.0),
        SceneStyle::Surround => (180.0, 60.0, 0.05, 8.0),
    };
    let n = cars + pedestrians;
    let mut objects = Vec::with_capacity(n);
    for k in 0..n {
        let class = if k < cars {
            ObjectClass::Car
        } else {
            ObjectClass::Pedestrian
        };
        let dims = match class {
            ObjectClass::Car => [
                rng.random_range(3.8..4.8),
                rng.random_range(1.7..2.0),
                rng.random_range(1.4..1.7),
            ],
            ObjectClass::Pedestrian => [
                rng.random_range(0.5..0.9),
                rng.random_range(0.5..0.8),
                rng.random_range(1.6..1.9),
            ],
        };
        let (x, y) = match style {
            SceneStyle::RailFrustum => {
                // Slots along +x; lateral offset stays well inside the frustum.
                let x = 40.0 + slot_len * k as f64 + rng.random_range(-2.0..2.0);
                let max_y = x * 0.10 - 3.0;
                (x, rng.random_range(-max_y..max_y))
            }
            SceneStyle::Surround => {
                let angle = 2.0 * PI * k as f64 / n.max(1) as f64 + rng.random_range(-0.2..0.2);
                let r = 15.0 + slot_len * (k % 3) as f64 + rng.random_range(-1.0..1.0);
                (r * angle.cos(), r * angle.sin())
            }
        };
        objects.push(ObjectPlacement {
            class,
            center: [x, y, 0.5 * dims[2]],
            dims,
            yaw: rng.random_range(-PI..PI),
            points: points_per_object,
        });
    }
    SceneSpec {
        seed,
        sequence_id: sequence_id.to_string(),
        frame_id,
        domain,
        ground_extent: extent,
        ground_density: density,
        frustum_half_angle_deg: half_angle,
        objects,
        noise_sigma: 0.05,
        with_intensity: true,
    }
}

/// Generate a dataset of `frames` scenes into `root`, splits assigned by the
/// 10-frame batch rule, and write its manifest.
#[allow(clippy::too_many_arguments)]
pub fn gen_dataset(
    root: &Path,
    name: &str,
    domain: DomainKind,
    style: SceneStyle,
    frames: usize,
    cars: usize,
    pedestrians: usize,
    seed: u64,
) -> Result<Dataset, SceneError> {
    let splits = assign_splits_batch10(frames);
    let records: Vec<FrameRecord> = splits
        .iter()
        .enumerate()
        .map(|(i, &s)| FrameRecord::standard("seq0", i as u64, s))
        .collect();
    let mut manifest = DatasetManifest {
        name: name.to_string(),
        kind: domain,
        frames: records,
        ground_z_offset: 0.0,
        intensity_mode: IntensityMode::Native,
        point_record: PointRecord::XYZI,
        native_intensity_max: 1.0,
        class_aliases: [
            ("Vehicle".to_string(), ObjectClass::Car),
            ("Person".to_string(), ObjectClass::Pedestrian),
        ]
        .into_iter()
        .collect(),
        split_counts: None,
    };
    manifest.split_counts = Some(manifest.count_splits());
    let dataset = Dataset::new(manifest, root);
    for (i, rec) in dataset.manifest.frames.iter().enumerate() {
        let spec = random_scene_spec(
            seed.wrapping_add(i as u64),
            &rec.sequence_id,
            rec.frame_id,
            domain,
            style,
            cars,
            pedestrians,
            30,
        );
        dataset.write_frame(rec, &gen_scene(&spec)?)?;
    }
    dataset.save()?;
    Ok(dataset)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// Axis-aligned half-extents of a rotated rectangle.
fn aabb_half(b: &Box3D) -> (f64, f64) {
    let (s, c) = b.yaw().sin_cos();
    let (hl, hw) = (0.5 * b.length(), 0.5 * b.width());
    (c.abs() * hl + s.abs() * hw, s.abs() * hl + c.abs() * hw)
}

fn inside_bev(x: f64, y: f64, b: &Box3D, axes: (f64, f64)) -> bool {
    let (s, c) = axes;
    let [cx, cy, _] = b.center();
    let dx = x - cx;
    let dy = y - cy;
    (dx * c + dy * s).abs() <= 0.5 * b.length() && (dy * c - dx * s).abs() <= 0.5 * b.width()
}

/// BEV IoU by uniform rejection sampling over the joint bounding rectangle.
pub fn mc_iou_bev<R: Rng>(
    a: &Box3D,
    b: &Box3D,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate, SceneError> {
    if samples < 100_000 {
        return Err(SceneError::TooFewSamples(samples));
    }
    let (ahx, ahy) = aabb_half(a);
    let (bhx, bhy) = aabb_half(b);
    let [ax, ay, _] = a.center();
    let [bx, by, _] = b.center();
    let x0 = (ax - ahx).min(bx - bhx);
    let x1 = (ax + ahx).max(bx + bhx);
    let y0 = (ay - ahy).min(by - bhy);
    let y1 = (ay + ahy).max(by + bhy);
    let axes_a = a.yaw().sin_cos();
    let axes_b = b.yaw().sin_cos();
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let x = x0 + (x1 - x0) * rng.random::<f64>();
        let y = y0 + (y1 - y0) * rng.random::<f64>();
        let ia = inside_bev(x, y, a, axes_a);
        let ib = inside_bev(x, y, b, axes_b);
        both += (ia && ib) as u64;
        either += (ia || ib) as u64;
    }
    if either == 0 {
        return Ok(McEstimate {
            value: 0.0,
            std_err: 0.0,
        });
    }
    let p = both as f64 / either as f64;
    Ok(McEstimate {
        value: p,
        std_err: (p * (1.0 - p) / either as f64).sqrt(),
    })
}

/// Number of grid centers `origin + (k + 0.5) * cell`, `0 <= k < n`, in `[lo, hi]`.
fn centers_in(origin: f64, cell: f64, n: i64, lo: f64, hi: f64) -> i64 {
    if hi < lo {
        return 0;
    }
    let k0 = ((lo - origin) / cell - 0.5).ceil().max(0.0) as i64;
    let k1 = (((hi - origin) / cell - 0.5).floor() as i64).min(n - 1);
    (k1 - k0 + 1).max(0)
}

/// 3D IoU by counting cubic cells of side `cell` whose centers fall in each
/// box, over a grid spanning both boxes. Boxes are vertical prisms, so each
/// column's vertical count is taken in one step.
pub fn voxel_iou_3d(a: &Box3D, b: &Box3D, cell: f64) -> Result<f64, SceneError> {
    if !(cell > 0.0 && cell <= 0.05) {
        return Err(SceneError::BadCell(cell));
    }
    let (ahx, ahy) = aabb_half(a);
    let (bhx, bhy) = aabb_half(b);
    let [ax, ay, az] = a.center();
    let [bx, by, bz] = b.center();
    let x0 = (ax - ahx).min(bx - bhx);
    let y0 = (ay - ahy).min(by - bhy);
    let z0 = (az - 0.5 * a.height()).min(bz - 0.5 * b.height());
    let nx = (((ax + ahx).max(bx + bhx) - x0) / cell).ceil() as i64;
    let ny = (((ay + ahy).max(by + bhy) - y0) / cell).ceil() as i64;
    let nz = (((az + 0.5 * a.height()).max(bz + 0.5 * b.height()) - z0) / cell).ceil() as i64;
    let za = centers_in(z0, cell, nz, az - 0.5 * a.height(), az + 0.5 * a.height());
    let zb = centers_in(z0, cell, nz, bz - 0.5 * b.height(), bz + 0.5 * b.height());
    let zab = centers_in(
        z0,
        cell,
        nz,
        (az - 0.5 * a.height()).max(bz - 0.5 * b.height()),
        (az + 0.5 * a.height()).min(bz + 0.5 * b.height()),
    );
    let axes_a = a.yaw().sin_cos();
    let axes_b = b.yaw().sin_cos();
    let (mut va, mut vb, mut vab) = (0i64, 0i64, 0i64);
    for i in 0..nx {
        let x = x0 + (i as f64 + 0.5) * cell;
        for j in 0..ny {
            let y = y0 + (j as f64 + 0.5) * cell;
            let ia = inside_bev(x, y, a, axes_a);
            let ib = inside_bev(x, y, b, axes_b);
            if ia {
                va += za;
            }
            if ib {
                vb += zb;
            }
            if ia && ib {
                vab += zab;
            }
        }
    }
    let union = va + vb - vab;
    Ok(if union == 0 {
        0.0
    } else {
        vab as f64 / union as f64
    })
}

/// Greedy score-ordered matching, written out longhand for cross-checking.
/// Returns the true-positive flag of every detection in input order.
pub fn exhaustive_match<F>(
    dets: &[Detection],
    gts: &[LabeledBox],
    threshold: f64,
    iou: F,
) -> Vec<bool>
where
    F: Fn(&Box3D, &Box3D) -> f64,
{
    // Selection sort by descending score, earlier index first on ties.
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    while !remaining.is_empty() {
        let mut pick = 0;
        for (slot, &d) in remaining.iter().enumerate() {
            if dets[d].score > dets[remaining[pick]].score {
                pick = slot;
            }
        }
        let d = remaining.remove(pick);
        let candidates: Vec<(usize, f64)> = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !taken[*g] && gt.class == dets[d].class)
            .map(|(g, gt)| (g, iou(&dets[d].bbox, &gt.bbox)))
            .filter(|&(_, v)| v >= threshold)
            .collect();
        let best = candidates
            .iter()
            .fold(None::<(usize, f64)>, |acc, &(g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[d] = true;
        }
    }
    tp
}

/// AP40 from the definition, for instances of at most 50 detections.
///
/// For every recall level `r` in `{1/40, ..., 1}` and every cut-off `n`
/// of the score-ranked list, precision and recall are recomputed from
/// scratch; the interpolated precision is the best precision among cut-offs
/// with recall at least `r`. Returns `None` when there is no ground truth.
pub fn exhaustive_ap<F>(
    dets: &[Detection],
    gts: &[LabeledBox],
    threshold: f64,
    iou: F,
) -> Result<Option<f64>, SceneError>
where
    F: Fn(&Box3D, &Box3D) -> f64,
{
    if dets.len() > 50 {
        return Err(SceneError::TooManyDetections(dets.len()));
    }
    if gts.is_empty() {
        return Ok(None);
    }
    let tp = exhaustive_match(dets, gts, threshold, iou);
    Ok(Some(exhaustive_ap_from_flags(
        &dets.iter().map(|d| d.score).zip(tp).collect::<Vec<_>>(),
        gts.len(),
    )))
}

/// Definition-level AP40 over `(score, is_tp)` pairs.
pub fn exhaustive_ap_from_flags(flags: &[(f64, bool)], total_gt: usize) -> f64 {
    let mut ranked: Vec<usize> = (0..flags.len()).collect();
    // Insertion sort keeps equal scores in input order.
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && flags[ranked[j - 1]].0 < flags[ranked[j]].0 {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut total = 0.0;
    for level in 1..=40 {
        let r = level as f64 / 40.0;
        let mut best = 0.0f64;
        for n in 1..=ranked.len() {
            let hits = ranked[..n].iter().filter(|&&i| flags[i].1).count();
            let recall = hits as f64 / total_gt as f64;
            if recall >= r {
                best = best.max(hits as f64 / n as f64);
            }
        }
        total += best;
    }
    total / 40.0 * 100.0
}
