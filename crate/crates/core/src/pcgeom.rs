//! Oriented box geometry and point-cloud primitives.
//!
//! Boxes are yaw-only (rotation about +z), centered, with `dims = (length,
//! width, height)` where length runs along the box's local x axis. All
//! geometric computation is done in `f64`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cross products with magnitude below this are treated as collinear by the
/// polygon clipper.
pub const CLIP_EPS: f64 = 1e-9;

/// Union areas or volumes below this yield an IoU of zero.
pub const UNION_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("box dimensions must be positive, got {0:?}")]
    BadDims([f64; 3]),
    #[error("intensity {value} at point {index} is negative or non-finite")]
    BadIntensity { index: usize, value: f64 },
    #[error("{channel} channel has {got} entries, cloud has {expected} points")]
    ChannelLength {
        channel: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
}

/// Normalize an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// A single point. `intensity` is on the dataset's native scale until
/// harmonized into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: Option<f64>,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: None,
        }
    }
}

/// Columnar point cloud. Optional channels, when present, have one entry per
/// point. Intensities are non-negative and finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    xyz: Vec<[f64; 3]>,
    intensity: Option<Vec<f64>>,
    sensor_id: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a cloud from coordinates and optional channels, checking every
    /// invariant.
    pub fn from_parts(
        xyz: Vec<[f64; 3]>,
        intensity: Option<Vec<f64>>,
        sensor_id: Option<Vec<u8>>,
    ) -> Result<Self, GeomError> {
        if xyz.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("point coordinates"));
        }
        if let Some(inten) = &intensity {
            if inten.len() != xyz.len() {
                return Err(GeomError::ChannelLength {
                    channel: "intensity",
                    expected: xyz.len(),
                    got: inten.len(),
                });
            }
            if let Some((index, &value)) = inten
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
            {
                return Err(GeomError::BadIntensity { index, value });
            }
        }
        if let Some(ids) = &sensor_id {
            if ids.len() != xyz.len() {
                return Err(GeomError::ChannelLength {
                    channel: "sensor_id",
                    expected: xyz.len(),
                    got: ids.len(),
                });
            }
        }
        Ok(Self {
            xyz,
            intensity,
            sensor_id,
        })
    }

    /// Coordinates-only cloud.
    pub fn from_xyz(xyz: Vec<[f64; 3]>) -> Result<Self, GeomError> {
        Self::from_parts(xyz, None, None)
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn xyz(&self) -> &[[f64; 3]] {
        &self.xyz
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn sensor_id(&self) -> Option<&[u8]> {
        self.sensor_id.as_deref()
    }

    pub fn point(&self, i: usize) -> Point3 {
        let [x, y, z] = self.xyz[i];
        Point3 {
            x,
            y,
            z,
            intensity: self.intensity.as_ref().map(|v| v[i]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Point3> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// New cloud holding the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            xyz: indices.iter().map(|&i| self.xyz[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
            sensor_id: self
                .sensor_id
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Keep points for which `keep(index, point)` is true.
    pub fn retain_by<F: FnMut(usize, &[f64; 3]) -> bool>(&self, mut keep: F) -> Self {
        let idx: Vec<usize> = self
            .xyz
            .iter()
            .enumerate()
            .filter(|(i, p)| keep(*i, p))
            .map(|(i, _)| i)
            .collect();
        self.select(&idx)
    }

    /// Concatenate two clouds. A channel survives only if both sides carry it.
    pub fn concat(&self, other: &PointCloud) -> Self {
        let mut xyz = self.xyz.clone();
        xyz.extend_from_slice(&other.xyz);
        let intensity = match (&self.intensity, &other.intensity) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        let sensor_id = match (&self.sensor_id, &other.sensor_id) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self {
            xyz,
            intensity,
            sensor_id,
        }
    }

    /// Apply `f` to every coordinate triple.
    pub fn map_xyz<F: Fn([f64; 3]) -> [f64; 3]>(&self, f: F) -> Self {
        Self {
            xyz: self.xyz.iter().map(|&p| f(p)).collect(),
            intensity: self.intensity.clone(),
            sensor_id: self.sensor_id.clone(),
        }
    }

    pub fn with_intensity(&self, intensity: Option<Vec<f64>>) -> Result<Self, GeomError> {
        Self::from_parts(self.xyz.clone(), intensity, self.sensor_id.clone())
    }

    pub fn with_sensor_id(&self, sensor_id: Option<Vec<u8>>) -> Result<Self, GeomError> {
        Self::from_parts(self.xyz.clone(), self.intensity.clone(), sensor_id)
    }
}

/// Yaw-oriented 3D box. `yaw` is normalized into `(-pi, pi]` on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct Box3D {
    center: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

impl TryFrom<RawBox> for Box3D {
    type Error = GeomError;
    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        Box3D::new(r.center, r.size, r.yaw)
    }
}

impl From<Box3D> for RawBox {
    fn from(b: Box3D) -> Self {
        RawBox {
            center: b.center,
            size: b.dims,
            yaw: b.yaw,
        }
    }
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self, GeomError> {
        if center.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("box center"));
        }
        if !yaw.is_finite() {
            return Err(GeomError::NonFinite("box yaw"));
        }
        if dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(GeomError::BadDims(dims));
        }
        Ok(Self {
            center,
            dims,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn dims(&self) -> [f64; 3] {
        self.dims
    }

    pub fn length(&self) -> f64 {
        self.dims[0]
    }

    pub fn width(&self) -> f64 {
        self.dims[1]
    }

    pub fn height(&self) -> f64 {
        self.dims[2]
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn bottom(&self) -> f64 {
        self.center[2] - 0.5 * self.dims[2]
    }

    pub fn top(&self) -> f64 {
        self.center[2] + 0.5 * self.dims[2]
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    /// Same box moved to a new center.
    pub fn with_center(&self, center: [f64; 3]) -> Self {
        Self { center, ..*self }
    }

    /// Whether `p` lies inside the closed box.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let lz = p[2] - self.center[2];
        lx.abs() <= 0.5 * self.dims[0]
            && ly.abs() <= 0.5 * self.dims[1]
            && lz.abs() <= 0.5 * self.dims[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 2] = [ObjectClass::Car, ObjectClass::Pedestrian];

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
        }
    }

    /// Parse a canonical class name.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "Car" => Some(ObjectClass::Car),
            "Pedestrian" => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A box with its class. `score` is set for detections and pseudo-labels and
/// absent for ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub score: Option<f64>,
}

impl LabeledBox {
    pub fn ground_truth(bbox: Box3D, class: ObjectClass) -> Self {
        Self {
            bbox,
            class,
            score: None,
        }
    }

    pub fn scored(bbox: Box3D, class: ObjectClass, score: f64) -> Result<Self, GeomError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeomError::BadScore(score));
        }
        Ok(Self {
            bbox,
            class,
            score: Some(score),
        })
    }
}

/// BEV footprint corners, counter-clockwise, starting at the local
/// (+length/2, +width/2) corner.
pub fn bev_corners(b: &Box3D) -> [[f64; 2]; 4] {
    let hl = 0.5 * b.dims[0];
    let hw = 0.5 * b.dims[1];
    let (s, c) = b.yaw.sin_cos();
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[lx, ly]| [b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly])
}

/// Signed area by the shoelace formula; positive for counter-clockwise order.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Intersection of segment p→q with the infinite line through a→b.
fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland-Hodgman clip of `subject` by the convex, counter-clockwise
/// `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the BEV footprint intersection of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // Cheap reject on circumscribed circles.
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let ra = 0.5 * a.dims[0].hypot(a.dims[1]);
    let rb = 0.5 * b.dims[0].hypot(b.dims[1]);
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let pa = bev_corners(a);
    let pb = bev_corners(b);
    polygon_area(&clip_convex(&pa, &pb)).max(0.0)
}

/// Bird's-eye-view IoU of two boxes, in `[0, 1]`.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union < UNION_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Full 3D IoU of two yaw-oriented boxes, in `[0, 1]`.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let overlap_z = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if overlap_z == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_z;
    let union = a.volume() + b.volume() - inter;
    if union < UNION_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of points inside the closed box, ascending.
pub fn points_in_box(cloud: &PointCloud, b: &Box3D) -> Vec<usize> {
    cloud
        .xyz()
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// Number of points inside the closed box.
pub fn count_points_in_box(cloud: &PointCloud, b: &Box3D) -> usize {
    cloud.xyz().iter().filter(|p| b.contains(p)).count()
}

/// Planar shift; z, yaw, dims and point channels are left untouched.
pub trait TranslateHorizontal {
    fn translate_horizontal(&self, v: [f64; 2]) -> Self;
}

impl TranslateHorizontal for PointCloud {
    fn translate_horizontal(&self, v: [f64; 2]) -> Self {
        self.map_xyz(|[x, y, z]| [x + v[0], y + v[1], z])
    }
}

impl TranslateHorizontal for Box3D {
    fn translate_horizontal(&self, v: [f64; 2]) -> Self {
        let [x, y, z] = self.center;
        self.with_center([x + v[0], y + v[1], z])
    }
}

impl TranslateHorizontal for LabeledBox {
    fn translate_horizontal(&self, v: [f64; 2]) -> Self {
        LabeledBox {
            bbox: self.bbox.translate_horizontal(v),
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(c: [f64; 3], d: [f64; 3], yaw: f64) -> Box3D {
        Box3D::new(c, d, yaw).unwrap()
    }

    fn same_corner_set(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4], tol: f64) -> bool {
        a.iter().all(|p| {
            b.iter()
                .any(|q| (p[0] - q[0]).abs() <= tol && (p[1] - q[1]).abs() <= tol)
        })
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(PI), PI);
        assert_eq!(normalize_yaw(-PI), PI);
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(-0.5) + 0.5).abs() < 1e-15);
        let b = bx([0.0; 3], [1.0; 3], 7.0);
        assert!(b.yaw() > -PI && b.yaw() <= PI);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(matches!(
            Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0),
            Err(GeomError::BadDims(_))
        ));
        assert!(Box3D::new([f64::NAN, 0.0, 0.0], [1.0; 3], 0.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], f64::INFINITY).is_err());
    }

    #[test]
    fn cloud_channel_checks() {
        assert!(PointCloud::from_parts(vec![[0.0; 3]], Some(vec![]), None).is_err());
        assert!(PointCloud::from_parts(vec![[0.0; 3]], Some(vec![-0.5]), None).is_err());
        assert!(PointCloud::from_parts(vec![[0.0; 3]], None, Some(vec![1, 2])).is_err());
        assert!(PointCloud::from_xyz(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn corners_axis_aligned_square() {
        let c = bev_corners(&bx([0.0; 3], [2.0, 2.0, 1.0], 0.0));
        let expect = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        assert!(same_corner_set(&c, &expect, 1e-15));
        assert!(polygon_area(&c) > 0.0);
    }

    #[test]
    fn corners_square_quarter_turn() {
        let a = bev_corners(&bx([0.0; 3], [2.0, 2.0, 1.0], 0.0));
        let b = bev_corners(&bx([0.0; 3], [2.0, 2.0, 1.0], PI / 2.0));
        assert!(same_corner_set(&a, &b, 1e-12));
    }

    #[test]
    fn corners_match_rotation_matrix() {
        // Rotation-matrix oracle: R(yaw) * local + center, evaluated explicitly.
        let yaw = PI / 4.0;
        let r = [[yaw.cos(), -yaw.sin()], [yaw.sin(), yaw.cos()]];
        let local = [[2.0, 1.0], [-2.0, 1.0], [-2.0, -1.0], [2.0, -1.0]];
        let expect = local.map(|[u, v]| {
            [
                3.0 + r[0][0] * u + r[0][1] * v,
                1.0 + r[1][0] * u + r[1][1] * v,
            ]
        });
        let got = bev_corners(&bx([3.0, 1.0, 0.0], [4.0, 2.0, 1.0], yaw));
        for (g, e) in got.iter().zip(&expect) {
            assert!((g[0] - e[0]).abs() < 1e-12 && (g[1] - e[1]).abs() < 1e-12);
        }
        assert!((polygon_area(&got) - 8.0).abs() < 1e-9);
    }

    #[test]
    fn iou_bev_examples() {
        let a = bx([0.0; 3], [2.0, 2.0, 2.0], 0.0);
        assert_eq!(iou_bev(&a, &a), 1.0);
        let far = bx([10.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0);
        assert_eq!(iou_bev(&a, &far), 0.0);
        let shifted = bx([1.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0);
        assert!((iou_bev(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_bev_rotated_square_closed_form() {
        // Square of side 2 and the same square turned 45 degrees overlap in a
        // regular octagon of area 8(sqrt2 - 1).
        let a = bx([0.0; 3], [2.0, 2.0, 2.0], 0.0);
        let b = bx([0.0; 3], [2.0, 2.0, 2.0], PI / 4.0);
        let inter = 8.0 * (2f64.sqrt() - 1.0);
        let expect = inter / (8.0 - inter);
        assert!((iou_bev(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn iou_3d_examples() {
        let a = bx([0.0; 3], [2.0, 2.0, 2.0], 0.3);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        let up = bx([0.0, 0.0, 2.0], [2.0, 2.0, 2.0], 0.3);
        assert_eq!(iou_3d(&a, &up), 0.0);
        // half vertical overlap, same footprint: 4*1 / (8 + 8 - 4)
        let half = bx([0.0, 0.0, 1.0], [2.0, 2.0, 2.0], 0.3);
        assert!((iou_3d(&a, &half) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn points_in_box_examples() {
        let b = bx([0.0; 3], [2.0, 2.0, 2.0], 0.0);
        let cloud = PointCloud::from_xyz(vec![[0.0, 0.0, 0.0], [1.01, 0.0, 0.0], [1.0, 1.0, -1.0]])
            .unwrap();
        assert_eq!(points_in_box(&cloud, &b), vec![0, 2]);
    }

    #[test]
    fn translate_examples() {
        let b = bx([1.0, 2.0, 3.0], [1.0; 3], 0.2);
        let t = b.translate_horizontal([4.0, -1.0]);
        assert_eq!(t.center(), [5.0, 1.0, 3.0]);
        assert_eq!(t.yaw(), b.yaw());
        assert_eq!(b.translate_horizontal([0.0, 0.0]), b);
        let back = t.translate_horizontal([-4.0, 1.0]);
        assert_eq!(back, b);
    }

    #[test]
    fn clip_handles_shared_edges() {
        // Boxes sharing a full edge: zero-area intersection, no panic.
        let a = bx([0.0; 3], [2.0, 2.0, 1.0], 0.0);
        let b = bx([2.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0);
        assert!(iou_bev(&a, &b).abs() < 1e-12);
        // Nested boxes.
        let inner = bx([0.0; 3], [1.0, 1.0, 1.0], 0.0);
        assert!((iou_bev(&a, &inner) - 0.25).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -20.0..20.0f64,
            -20.0..20.0f64,
            -2.0..2.0f64,
            0.2..6.0f64,
            0.2..6.0f64,
            0.2..3.0f64,
            -PI..PI,
        )
            .prop_map(|(x, y, z, l, w, h, yaw)| bx([x, y, z], [l, w, h], yaw))
    }

    fn rect_iou(a: &Box3D, b: &Box3D) -> f64 {
        let ix = ((a.center[0] + a.length() / 2.0).min(b.center[0] + b.length() / 2.0)
            - (a.center[0] - a.length() / 2.0).max(b.center[0] - b.length() / 2.0))
        .max(0.0);
        let iy = ((a.center[1] + a.width() / 2.0).min(b.center[1] + b.width() / 2.0)
            - (a.center[1] - a.width() / 2.0).max(b.center[1] - b.width() / 2.0))
        .max(0.0);
        let i = ix * iy;
        i / (a.bev_area() + b.bev_area() - i)
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou_bev(&a, &b);
            let ba = iou_bev(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
            let ab3 = iou_3d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab3));
            prop_assert!((ab3 - iou_3d(&b, &a)).abs() < 1e-9);
            prop_assert!(ab3 <= 1.0);
        }

        #[test]
        fn iou_bev_rigid_invariance(a in arb_box(), b in arb_box(),
                                    tx in -50.0..50.0f64, ty in -50.0..50.0f64, rot in -PI..PI) {
            let (s, c) = rot.sin_cos();
            let move_box = |bb: &Box3D| {
                let [x, y, z] = bb.center();
                bx([c * x - s * y + tx, s * x + c * y + ty, z], bb.dims(), bb.yaw() + rot)
            };
            let before = iou_bev(&a, &b);
            let after = iou_bev(&move_box(&a), &move_box(&b));
            prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        }

        #[test]
        fn axis_aligned_matches_rect_formula(a in arb_box(), b in arb_box()) {
            let a0 = bx(a.center(), a.dims(), 0.0);
            let b0 = bx(b.center(), b.dims(), 0.0);
            prop_assert!((iou_bev(&a0, &b0) - rect_iou(&a0, &b0)).abs() < 1e-12);
        }

        #[test]
        fn corner_area_equals_length_times_width(a in arb_box()) {
            prop_assert!((polygon_area(&bev_corners(&a)) - a.length() * a.width()).abs() < 1e-9);
        }

        #[test]
        fn identical_boxes_have_unit_iou(a in arb_box()) {
            prop_assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
            prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn membership_translation_invariant(
            a in arb_box(),
            pts in proptest::collection::vec((-25.0..25.0f64, -25.0..25.0f64, -3.0..3.0f64), 0..200),
            vx in -10.0..10.0f64, vy in -10.0..10.0f64,
        ) {
            // Quantized so that the shift is exact in binary floating point.
            let q = |v: f64| (v * 256.0).round() / 256.0;
            let cloud = PointCloud::from_xyz(pts.iter().map(|&(x, y, z)| [q(x), q(y), z]).collect()).unwrap();
            let b = bx([q(a.center()[0]), q(a.center()[1]), a.center()[2]], a.dims(), a.yaw());
            let v = [q(vx), q(vy)];
            prop_assert_eq!(
                points_in_box(&cloud, &b),
                points_in_box(&cloud.translate_horizontal(v), &b.translate_horizontal(v))
            );
        }
    }
}
