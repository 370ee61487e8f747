//! Per-frame dataset harmonization.
//!
//! The five stages run in a fixed order: range clip, frustum/sensor
//! selection, ground alignment, minimum-points label filtering and intensity
//! harmonization. [`FilterConfig`] rejects any other order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DatasetManifest, DomainKind, IntensityMode};
use crate::pcgeom::{count_points_in_box, GeomError, LabeledBox, PointCloud};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("invalid range box: {0}")]
    BadRange(String),
    #[error("frustum half-angle must be in (0, 180] degrees, got {0}")]
    BadHalfAngle(f64),
    #[error("sensor id {0} requested but the cloud has no per-point sensor ids")]
    NoSensorIds(u8),
    #[error("native intensity mode requested but the cloud has no intensity channel")]
    NoIntensity,
    #[error("native intensity maximum must be positive and finite, got {0}")]
    BadIntensityMax(f64),
    #[error("min-points threshold must be at least 1")]
    BadMinPoints,
    #[error("filter stages out of order: {0:?} (required order: clip, frustum, ground_align, min_points, intensity)")]
    StageOrder(Vec<FilterStage>),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// One point cloud with its labels and identity; the unit of pipeline work.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub labels: Vec<LabeledBox>,
    pub domain: DomainKind,
    pub frame_id: u64,
    pub sequence_id: String,
}

impl Frame {
    pub fn new(
        cloud: PointCloud,
        labels: Vec<LabeledBox>,
        domain: DomainKind,
        sequence_id: impl Into<String>,
        frame_id: u64,
    ) -> Self {
        Self {
            cloud,
            labels,
            domain,
            frame_id,
            sequence_id: sequence_id.into(),
        }
    }

    fn with_parts(&self, cloud: PointCloud, labels: Vec<LabeledBox>) -> Self {
        Self {
            cloud,
            labels,
            domain: self.domain,
            frame_id: self.frame_id,
            sequence_id: self.sequence_id.clone(),
        }
    }
}

/// Axis-aligned detection range, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct RangeBox {
    min: [f64; 3],
    max: [f64; 3],
}

impl RangeBox {
    /// `[0, -54, -3, 216, 54, 6.8]`, the long-range railway detection grid.
    pub const RAILWAY: RangeBox = RangeBox {
        min: [0.0, -54.0, -3.0],
        max: [216.0, 54.0, 6.8],
    };

    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, FilterError> {
        for axis in 0..3 {
            if !(min[axis].is_finite() && max[axis].is_finite()) {
                return Err(FilterError::BadRange("non-finite bound".into()));
            }
            if min[axis] >= max[axis] {
                return Err(FilterError::BadRange(format!(
                    "axis {axis}: min {} >= max {}",
                    min[axis], max[axis]
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> [f64; 3] {
        self.min
    }

    pub fn max(&self) -> [f64; 3] {
        self.max
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

impl Default for RangeBox {
    fn default() -> Self {
        Self::RAILWAY
    }
}

impl TryFrom<[f64; 6]> for RangeBox {
    type Error = FilterError;
    fn try_from(v: [f64; 6]) -> Result<Self, Self::Error> {
        RangeBox::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }
}

impl From<RangeBox> for [f64; 6] {
    fn from(r: RangeBox) -> Self {
        [r.min[0], r.min[1], r.min[2], r.max[0], r.max[1], r.max[2]]
    }
}

/// Drop points outside the range and labels whose center is outside it.
pub fn clip_range(frame: &Frame, range: &RangeBox) -> Frame {
    let cloud = frame.cloud.retain_by(|_, p| range.contains(p));
    let labels = frame
        .labels
        .iter()
        .filter(|l| range.contains(&l.bbox.center()))
        .copied()
        .collect();
    frame.with_parts(cloud, labels)
}

/// Keep either the points of one sensor, or (without a sensor id) the
/// points within `half_angle_deg` of the +x axis. Labels are untouched.
pub fn frustum_filter(
    frame: &Frame,
    half_angle_deg: f64,
    sensor_id: Option<u8>,
) -> Result<Frame, FilterError> {
    if !(half_angle_deg > 0.0 && half_angle_deg <= 180.0) {
        return Err(FilterError::BadHalfAngle(half_angle_deg));
    }
    let cloud = match sensor_id {
        Some(id) => {
            let ids = frame
                .cloud
                .sensor_id()
                .ok_or(FilterError::NoSensorIds(id))?;
            frame.cloud.retain_by(|i, _| ids[i] == id)
        }
        None if half_angle_deg >= 180.0 => frame.cloud.clone(),
        None => {
            let half = half_angle_deg.to_radians();
            frame.cloud.retain_by(|_, p| p[1].atan2(p[0]).abs() <= half)
        }
    };
    Ok(frame.with_parts(cloud, frame.labels.clone()))
}

/// Drop labels with fewer than `k` points inside their box.
pub fn min_points_filter(frame: &Frame, k: usize) -> Result<Frame, FilterError> {
    if k == 0 {
        return Err(FilterError::BadMinPoints);
    }
    let labels = frame
        .labels
        .iter()
        .filter(|l| count_points_in_box(&frame.cloud, &l.bbox) >= k)
        .copied()
        .collect();
    Ok(frame.with_parts(frame.cloud.clone(), labels))
}

/// Shift every point and label center by `-z_offset`.
pub fn ground_align(frame: &Frame, z_offset: f64) -> Frame {
    if z_offset == 0.0 {
        return frame.clone();
    }
    let cloud = frame.cloud.map_xyz(|[x, y, z]| [x, y, z - z_offset]);
    let labels = frame
        .labels
        .iter()
        .map(|l| {
            let [x, y, z] = l.bbox.center();
            LabeledBox {
                bbox: l.bbox.with_center([x, y, z - z_offset]),
                ..*l
            }
        })
        .collect();
    frame.with_parts(cloud, labels)
}

/// Bring intensities onto the shared `[0, 1]` scale.
///
/// `native_max` is only consulted in [`IntensityMode::Native`].
pub fn harmonize_intensity(
    frame: &Frame,
    mode: IntensityMode,
    native_max: f64,
) -> Result<Frame, FilterError> {
    let cloud = match mode {
        IntensityMode::Native => {
            if !(native_max > 0.0 && native_max.is_finite()) {
                return Err(FilterError::BadIntensityMax(native_max));
            }
            let raw = frame.cloud.intensity().ok_or(FilterError::NoIntensity)?;
            let scaled = raw
                .iter()
                .map(|&v| (v / native_max).clamp(0.0, 1.0))
                .collect();
            frame.cloud.with_intensity(Some(scaled))?
        }
        IntensityMode::ConstantOne => frame
            .cloud
            .with_intensity(Some(vec![1.0; frame.cloud.len()]))?,
        IntensityMode::Absent => frame.cloud.with_intensity(None)?,
    };
    Ok(frame.with_parts(cloud, frame.labels.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Clip,
    Frustum,
    GroundAlign,
    MinPoints,
    Intensity,
}

impl FilterStage {
    pub const ORDER: [FilterStage; 5] = [
        FilterStage::Clip,
        FilterStage::Frustum,
        FilterStage::GroundAlign,
        FilterStage::MinPoints,
        FilterStage::Intensity,
    ];
}

fn default_half_angle() -> f64 {
    7.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrustumParams {
    /// Degrees either side of +x. 7.5 is half of the 15 degree TELE-15 aperture.
    #[serde(default = "default_half_angle")]
    pub half_angle_deg: f64,
    #[serde(default)]
    pub sensor_id: Option<u8>,
}

impl Default for FrustumParams {
    fn default() -> Self {
        Self {
            half_angle_deg: default_half_angle(),
            sensor_id: None,
        }
    }
}

/// Per-dataset knobs. Fields left unset fall back to the config defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frustum: Option<FrustumParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_points: Option<usize>,
}

fn default_stages() -> Vec<FilterStage> {
    FilterStage::ORDER.to_vec()
}

fn default_dataset_filter() -> DatasetFilter {
    DatasetFilter {
        frustum: None,
        min_points: Some(5),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default)]
    pub range: RangeBox,
    #[serde(default = "default_stages")]
    pub stages: Vec<FilterStage>,
    #[serde(default = "default_dataset_filter")]
    pub defaults: DatasetFilter,
    #[serde(default)]
    pub per_dataset: BTreeMap<String, DatasetFilter>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            range: RangeBox::default(),
            stages: default_stages(),
            defaults: default_dataset_filter(),
            per_dataset: BTreeMap::new(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FilterError::StageOrder(self.stages.clone()));
        }
        for f in std::iter::once(&self.defaults).chain(self.per_dataset.values()) {
            if let Some(fr) = &f.frustum {
                if !(fr.half_angle_deg > 0.0 && fr.half_angle_deg <= 180.0) {
                    return Err(FilterError::BadHalfAngle(fr.half_angle_deg));
                }
            }
            if f.min_points == Some(0) {
                return Err(FilterError::BadMinPoints);
            }
        }
        Ok(())
    }

    /// Resolve the concrete stage parameters for one dataset.
    pub fn plan_for(&self, manifest: &DatasetManifest) -> Result<FilterPlan, FilterError> {
        self.validate()?;
        let over = self.per_dataset.get(&manifest.name);
        let frustum = over.and_then(|o| o.frustum).or(self.defaults.frustum);
        let min_points = over.and_then(|o| o.min_points).or(self.defaults.min_points);
        Ok(FilterPlan {
            stages: self.stages.clone(),
            range: self.range,
            frustum,
            ground_z_offset: manifest.ground_z_offset,
            min_points,
            intensity_mode: manifest.intensity_mode,
            native_intensity_max: manifest.native_intensity_max,
        })
    }
}

/// Fully resolved filter parameters for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPlan {
    pub stages: Vec<FilterStage>,
    pub range: RangeBox,
    pub frustum: Option<FrustumParams>,
    pub ground_z_offset: f64,
    pub min_points: Option<usize>,
    pub intensity_mode: IntensityMode,
    pub native_intensity_max: f64,
}

impl FilterPlan {
    pub fn apply(&self, frame: &Frame) -> Result<Frame, FilterError> {
        let mut out = frame.clone();
        for stage in &self.stages {
            out = match stage {
                FilterStage::Clip => clip_range(&out, &self.range),
                FilterStage::Frustum => match self.frustum {
                    Some(f) => frustum_filter(&out, f.half_angle_deg, f.sensor_id)?,
                    None => out,
                },
                FilterStage::GroundAlign => ground_align(&out, self.ground_z_offset),
                FilterStage::MinPoints => match self.min_points {
                    Some(k) => min_points_filter(&out, k)?,
                    None => out,
                },
                FilterStage::Intensity => {
                    harmonize_intensity(&out, self.intensity_mode, self.native_intensity_max)?
                }
            };
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcgeom::{Box3D, ObjectClass};
    use proptest::prelude::*;

    fn frame(points: Vec<[f64; 3]>, labels: Vec<LabeledBox>) -> Frame {
        Frame::new(
            PointCloud::from_xyz(points).unwrap(),
            labels,
            DomainKind::RealRail,
            "seq",
            0,
        )
    }

    fn car(c: [f64; 3]) -> LabeledBox {
        LabeledBox::ground_truth(
            Box3D::new(c, [4.0, 2.0, 2.0], 0.0).unwrap(),
            ObjectClass::Car,
        )
    }

    #[test]
    fn clip_examples() {
        let f = frame(
            vec![[1.0, 0.0, 0.0], [-0.1, 0.0, 0.0]],
            vec![car([5.0, 0.0, 0.0]), car([-5.0, 0.0, 0.0])],
        );
        let out = clip_range(&f, &RangeBox::RAILWAY);
        assert_eq!(out.cloud.xyz(), &[[1.0, 0.0, 0.0]]);
        assert_eq!(out.labels.len(), 1);
        let inside = frame(vec![[1.0, 2.0, 0.5]], vec![]);
        assert_eq!(clip_range(&inside, &RangeBox::RAILWAY), inside);
    }

    #[test]
    fn range_box_validation() {
        assert!(RangeBox::new([0.0; 3], [0.0, 1.0, 1.0]).is_err());
        let parsed: RangeBox =
            serde_json::from_str("[0.0, -54.0, -3.0, 216.0, 54.0, 6.8]").unwrap();
        assert_eq!(parsed, RangeBox::RAILWAY);
        assert!(serde_json::from_str::<RangeBox>("[1, 0, 0, 0, 1, 1]").is_err());
    }

    #[test]
    fn frustum_examples() {
        let f = frame(
            vec![
                [1.0, 1.0, 0.0],
                [10.0, 10.0 * 7f64.to_radians().tan(), 0.0],
                [-3.0, 0.0, 0.0],
            ],
            vec![car([50.0, 30.0, 0.0])],
        );
        assert_eq!(frustum_filter(&f, 180.0, None).unwrap(), f);
        let out = frustum_filter(&f, 7.5, None).unwrap();
        assert_eq!(out.cloud.len(), 1);
        assert_eq!(out.cloud.xyz()[0][0], 10.0);
        // Labels with no surviving points are left for min_points_filter.
        assert_eq!(out.labels.len(), 1);
        assert_eq!(
            frustum_filter(&f, 0.0, None),
            Err(FilterError::BadHalfAngle(0.0))
        );
        assert_eq!(
            frustum_filter(&f, 7.5, Some(1)),
            Err(FilterError::NoSensorIds(1))
        );
    }

    #[test]
    fn frustum_by_sensor() {
        let cloud = PointCloud::from_parts(
            vec![[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [2.0, 0.0, 0.0]],
            None,
            Some(vec![0, 1, 0]),
        )
        .unwrap();
        let f = Frame::new(cloud, vec![], DomainKind::RealRail, "s", 1);
        let out = frustum_filter(&f, 7.5, Some(0)).unwrap();
        assert_eq!(out.cloud.xyz(), &[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(out.cloud.sensor_id(), Some(&[0u8, 0][..]));
    }

    #[test]
    fn min_points_inclusive() {
        let pts = |n: usize, x: f64| (0..n).map(move |i| [x + 0.1 * i as f64, 0.0, 0.0]);
        let points: Vec<_> = pts(4, 0.0)
            .chain(pts(5, 10.0))
            .chain(pts(6, 20.0))
            .collect();
        let f = frame(
            points,
            vec![
                car([0.0, 0.0, 0.0]),
                car([10.0, 0.0, 0.0]),
                car([20.0, 0.0, 0.0]),
            ],
        );
        let out = min_points_filter(&f, 5).unwrap();
        let xs: Vec<f64> = out.labels.iter().map(|l| l.bbox.center()[0]).collect();
        assert_eq!(xs, vec![10.0, 20.0]);
        assert_eq!(out.cloud, f.cloud);
        assert_eq!(min_points_filter(&f, 0), Err(FilterError::BadMinPoints));
    }

    #[test]
    fn ground_align_examples() {
        let f = frame(
            vec![[1.0, 0.0, 3.0], [2.0, 0.0, 2.5]],
            vec![car([1.5, 0.0, 3.5])],
        );
        assert_eq!(ground_align(&f, 0.0), f);
        let out = ground_align(&f, 2.5);
        assert_eq!(out.cloud.xyz(), &[[1.0, 0.0, 0.5], [2.0, 0.0, 0.0]]);
        assert_eq!(out.labels[0].bbox.center()[2], 1.0);
        let membership = |fr: &Frame| crate::pcgeom::points_in_box(&fr.cloud, &fr.labels[0].bbox);
        assert_eq!(membership(&f), membership(&out));
        assert_eq!(ground_align(&out, -2.5), f);
    }

    #[test]
    fn intensity_modes() {
        let cloud = PointCloud::from_xyz(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let f = Frame::new(cloud.clone(), vec![], DomainKind::SyntheticRail, "s", 0);
        let one = harmonize_intensity(&f, IntensityMode::ConstantOne, 1.0).unwrap();
        assert_eq!(one.cloud.intensity(), Some(&[1.0, 1.0][..]));
        assert_eq!(
            harmonize_intensity(&f, IntensityMode::Native, 255.0),
            Err(FilterError::NoIntensity)
        );

        let raw = Frame::new(
            PointCloud::from_parts(cloud.xyz().to_vec(), Some(vec![255.0, 51.0]), None).unwrap(),
            vec![],
            DomainKind::RealRail,
            "s",
            0,
        );
        let scaled = harmonize_intensity(&raw, IntensityMode::Native, 255.0).unwrap();
        assert_eq!(scaled.cloud.intensity(), Some(&[1.0, 0.2][..]));
        assert_eq!(
            harmonize_intensity(&raw, IntensityMode::Native, 0.0),
            Err(FilterError::BadIntensityMax(0.0))
        );
        let dropped = harmonize_intensity(&raw, IntensityMode::Absent, 1.0).unwrap();
        assert_eq!(dropped.cloud.intensity(), None);
    }

    #[test]
    fn stage_order_enforced() {
        let mut cfg = FilterConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.stages = vec![FilterStage::MinPoints, FilterStage::Clip];
        assert!(matches!(cfg.validate(), Err(FilterError::StageOrder(_))));
        cfg.stages = vec![FilterStage::Clip, FilterStage::Clip];
        assert!(cfg.validate().is_err());
        cfg.stages = vec![FilterStage::Clip, FilterStage::MinPoints];
        assert!(cfg.validate().is_ok());
        let parsed: FilterConfig =
            serde_json::from_str(r#"{"stages": ["intensity", "clip"]}"#).unwrap();
        assert!(parsed.validate().is_err());
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        let pts =
            proptest::collection::vec((-20.0..250.0f64, -80.0..80.0f64, -5.0..10.0f64), 0..300);
        let boxes = proptest::collection::vec(
            (-10.0..230.0f64, -60.0..60.0f64, -1.0..3.0f64, -3.2..3.2f64),
            0..8,
        );
        (pts, boxes).prop_map(|(pts, boxes)| {
            let labels = boxes
                .into_iter()
                .map(|(x, y, z, yaw)| {
                    LabeledBox::ground_truth(
                        Box3D::new([x, y, z], [30.0, 20.0, 4.0], yaw).unwrap(),
                        ObjectClass::Car,
                    )
                })
                .collect();
            frame(pts.into_iter().map(|(x, y, z)| [x, y, z]).collect(), labels)
        })
    }

    proptest! {
        #[test]
        fn filters_are_idempotent(f in arb_frame(), k in 1usize..6, half in 1.0..180.0f64) {
            let c = clip_range(&f, &RangeBox::RAILWAY);
            prop_assert_eq!(clip_range(&c, &RangeBox::RAILWAY), c.clone());
            let fr = frustum_filter(&f, half, None).unwrap();
            prop_assert_eq!(frustum_filter(&fr, half, None).unwrap(), fr.clone());
            let m = min_points_filter(&f, k).unwrap();
            prop_assert_eq!(min_points_filter(&m, k).unwrap(), m.clone());
            let i = harmonize_intensity(&f, IntensityMode::ConstantOne, 1.0).unwrap();
            prop_assert_eq!(harmonize_intensity(&i, IntensityMode::ConstantOne, 1.0).unwrap(), i.clone());
            let a = harmonize_intensity(&f, IntensityMode::Absent, 1.0).unwrap();
            prop_assert_eq!(harmonize_intensity(&a, IntensityMode::Absent, 1.0).unwrap(), a);
            prop_assert_eq!(ground_align(&f, 0.0), f.clone());
        }

        #[test]
        fn filters_never_add(f in arb_frame(), k in 1usize..6) {
            let outs = [
                clip_range(&f, &RangeBox::RAILWAY),
                frustum_filter(&f, 7.5, None).unwrap(),
                min_points_filter(&f, k).unwrap(),
                ground_align(&f, 1.25),
            ];
            for o in &outs {
                prop_assert!(o.cloud.len() <= f.cloud.len());
                prop_assert!(o.labels.len() <= f.labels.len());
            }
            let h = harmonize_intensity(&f, IntensityMode::ConstantOne, 1.0).unwrap();
            prop_assert_eq!(h.cloud.len(), f.cloud.len());
        }

        #[test]
        fn clip_matches_componentwise_oracle(f in arb_frame()) {
            let out = clip_range(&f, &RangeBox::RAILWAY);
            let expect: Vec<[f64; 3]> = f.cloud.xyz().iter().copied().filter(|p| {
                p[0] >= 0.0 && p[0] <= 216.0 && p[1] >= -54.0 && p[1] <= 54.0 && p[2] >= -3.0 && p[2] <= 6.8
            }).collect();
            prop_assert_eq!(out.cloud.xyz(), &expect[..]);
        }
    }
}
