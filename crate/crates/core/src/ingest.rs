//! Dataset manifests, annotation and cloud file formats, split assignment and
//! dataset statistics.
//!
//! File formats:
//! * annotations: UTF-8 JSON `{frame_id, sensor, unit?, boxes: [{class,
//!   center: [x,y,z], size: [l,w,h], yaw, score?}]}`, meters and radians;
//! * clouds: packed little-endian `f32` records without header, `XYZ`
//!   (12 bytes) or `XYZI` (16 bytes);
//! * sensor sidecars: one `u8` sensor id per point;
//! * manifests: JSON [`DatasetManifest`], paths relative to the manifest's
//!   directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{FilterConfig, FilterError, Frame};
use crate::pcgeom::{Box3D, GeomError, LabeledBox, ObjectClass, PointCloud};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}: schema error: {msg}")]
    Schema { path: PathBuf, msg: String },
    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: non-finite value at point {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{} unreadable frame(s): {}", .0.len(), summarize_failures(.0))]
    Unreadable(Vec<(PathBuf, String)>),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

fn summarize_failures(f: &[(PathBuf, String)]) -> String {
    f.iter()
        .map(|(p, e)| format!("{} ({e})", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainKind {
    SyntheticRail,
    RealRail,
    RealAuto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensityMode {
    /// Divide by the manifest's native maximum.
    Native,
    /// The sensor provides no usable intensity; every point gets 1.0.
    ConstantOne,
    /// Drop the channel.
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointRecord {
    XYZ,
    XYZI,
}

impl PointRecord {
    pub fn floats(self) -> usize {
        match self {
            PointRecord::XYZ => 3,
            PointRecord::XYZI => 4,
        }
    }

    pub fn bytes(self) -> usize {
        4 * self.floats()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub sequence_id: String,
    pub cloud_path: String,
    pub annotation_path: String,
    pub split: Split,
    /// Optional per-point sensor id sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_path: Option<String>,
}

impl FrameRecord {
    /// Record with the conventional `clouds/` and `labels/` layout.
    pub fn standard(sequence_id: &str, frame_id: u64, split: Split) -> Self {
        let stem = format!("{sequence_id}_{frame_id:06}");
        Self {
            frame_id,
            sequence_id: sequence_id.to_string(),
            cloud_path: format!("clouds/{stem}.bin"),
            annotation_path: format!("labels/{stem}.json"),
            split,
            sensor_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn add(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

fn default_native_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DomainKind,
    pub frames: Vec<FrameRecord>,
    pub ground_z_offset: f64,
    pub intensity_mode: IntensityMode,
    pub point_record: PointRecord,
    #[serde(default = "default_native_max")]
    pub native_intensity_max: f64,
    /// Dataset-specific class names mapped onto the canonical classes, e.g.
    /// `"Vehicle": "Car"`.
    #[serde(default)]
    pub class_aliases: BTreeMap<String, ObjectClass>,
    /// Declared per-split frame counts; checked against `frames` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_counts: Option<SplitCounts>,
}

impl DatasetManifest {
    pub fn count_splits(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for f in &self.frames {
            c.add(f.split);
        }
        c
    }

    /// Every manifest-level invariant; returns all violations found.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.name.is_empty() {
            problems.push("empty dataset name".to_string());
        }
        if !self.ground_z_offset.is_finite() {
            problems.push("ground_z_offset is not finite".to_string());
        }
        if !(self.native_intensity_max > 0.0 && self.native_intensity_max.is_finite()) {
            problems.push(format!(
                "native_intensity_max must be positive, got {}",
                self.native_intensity_max
            ));
        }
        let mut seen = HashSet::new();
        for f in &self.frames {
            if !seen.insert((f.sequence_id.as_str(), f.frame_id)) {
                problems.push(format!(
                    "duplicate frame id {} in sequence {:?}",
                    f.frame_id, f.sequence_id
                ));
            }
            if f.cloud_path.is_empty() || f.annotation_path.is_empty() {
                problems.push(format!(
                    "empty path for frame {} in sequence {:?}",
                    f.frame_id, f.sequence_id
                ));
            }
        }
        if let Some(declared) = self.split_counts {
            let actual = self.count_splits();
            if declared != actual {
                problems.push(format!(
                    "declared split counts {declared:?} disagree with frame list {actual:?}"
                ));
            }
        }
        problems
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let problems = self.check();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(IngestError::Manifest(problems.join("; ")))
        }
    }

    /// Map a file class name onto a canonical class, honoring aliases.
    pub fn resolve_class(&self, name: &str) -> Option<ObjectClass> {
        resolve_class(name, &self.class_aliases)
    }
}

fn resolve_class(name: &str, aliases: &BTreeMap<String, ObjectClass>) -> Option<ObjectClass> {
    ObjectClass::from_name(name).or_else(|| aliases.get(name).copied())
}

/// Split for each of `n` frames in capture order: within consecutive batches
/// of ten (1-based position), position 6 goes to test, 3 and 9 to
/// validation, the rest to training.
pub fn assign_splits_batch10(n: usize) -> Vec<Split> {
    (0..n).map(split_for_position).collect()
}

/// Split for the frame at 0-based capture index `i`.
pub fn split_for_position(i: usize) -> Split {
    match i % 10 + 1 {
        6 => Split::Test,
        3 | 9 => Split::Val,
        _ => Split::Train,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    frame_id: u64,
    sensor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
    boxes: Vec<AnnotationEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    class: String,
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

/// Parsed annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub frame_id: u64,
    pub sensor: String,
    pub boxes: Vec<LabeledBox>,
    /// Entries whose class is neither canonical nor aliased.
    pub dropped: usize,
}

/// Parse annotation JSON. `path` is used only for error messages.
pub fn parse_annotations(
    text: &str,
    path: &Path,
    aliases: &BTreeMap<String, ObjectClass>,
) -> Result<Annotations, IngestError> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| IngestError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    if let Some(unit) = &file.unit {
        if !matches!(unit.as_str(), "m" | "meter" | "meters") {
            return Err(IngestError::Schema {
                path: path.to_path_buf(),
                msg: format!("unknown unit {unit:?}, expected meters"),
            });
        }
    }
    let mut boxes = Vec::with_capacity(file.boxes.len());
    let mut dropped = 0;
    for (i, e) in file.boxes.iter().enumerate() {
        let Some(class) = resolve_class(&e.class, aliases) else {
            dropped += 1;
            continue;
        };
        let schema = |msg: String| IngestError::Schema {
            path: path.to_path_buf(),
            msg: format!("boxes[{i}]: {msg}"),
        };
        let bbox = Box3D::new(e.center, e.size, e.yaw).map_err(|g| schema(g.to_string()))?;
        let lb = match e.score {
            Some(s) => LabeledBox::scored(bbox, class, s).map_err(|g| schema(g.to_string()))?,
            None => LabeledBox::ground_truth(bbox, class),
        };
        boxes.push(lb);
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} box(es) with unsupported classes",
            path.display()
        );
    }
    Ok(Annotations {
        frame_id: file.frame_id,
        sensor: file.sensor,
        boxes,
        dropped,
    })
}

pub fn load_annotations(
    path: &Path,
    aliases: &BTreeMap<String, ObjectClass>,
) -> Result<Annotations, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_annotations(&text, path, aliases)
}

/// Serialize annotations to the JSON schema.
pub fn annotations_to_json(frame_id: u64, sensor: &str, boxes: &[LabeledBox]) -> String {
    let file = AnnotationFile {
        frame_id,
        sensor: sensor.to_string(),
        unit: None,
        boxes: boxes
            .iter()
            .map(|b| AnnotationEntry {
                class: b.class.as_str().to_string(),
                center: b.bbox.center(),
                size: b.bbox.dims(),
                yaw: b.bbox.yaw(),
                score: b.score,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("annotation serialization");
    s.push('\n');
    s
}

pub fn write_annotations(
    path: &Path,
    frame_id: u64,
    sensor: &str,
    boxes: &[LabeledBox],
) -> Result<(), IngestError> {
    write_file(
        path,
        annotations_to_json(frame_id, sensor, boxes).as_bytes(),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// A decoded cloud and the number of intensities that had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCloud {
    pub cloud: PointCloud,
    pub clamped: usize,
}

/// Decode packed little-endian `f32` records. XYZI intensities are clamped to
/// `[0, intensity_max]`.
pub fn parse_cloud(
    bytes: &[u8],
    record: PointRecord,
    intensity_max: f64,
    path: &Path,
) -> Result<LoadedCloud, IngestError> {
    let width = record.bytes();
    if !bytes.len().is_multiple_of(width) {
        return Err(IngestError::Format {
            path: path.to_path_buf(),
            msg: format!(
                "size {} is not a multiple of the {width}-byte {record:?} record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / width;
    let mut xyz = Vec::with_capacity(n);
    let mut intensity = (record == PointRecord::XYZI).then(|| Vec::with_capacity(n));
    let mut clamped = 0;
    for (index, rec) in bytes.chunks_exact(width).enumerate() {
        let mut vals = [0f32; 4];
        for (k, chunk) in rec.chunks_exact(4).enumerate() {
            vals[k] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        if vals[..record.floats()].iter().any(|v| !v.is_finite()) {
            return Err(IngestError::NonFinite {
                path: path.to_path_buf(),
                index,
            });
        }
        xyz.push([vals[0] as f64, vals[1] as f64, vals[2] as f64]);
        if let Some(inten) = intensity.as_mut() {
            let raw = vals[3] as f64;
            let c = raw.clamp(0.0, intensity_max);
            if c != raw {
                clamped += 1;
            }
            inten.push(c);
        }
    }
    if clamped > 0 {
        log::warn!(
            "{}: clamped {clamped} intensity value(s) into [0, {intensity_max}]",
            path.display()
        );
    }
    Ok(LoadedCloud {
        cloud: PointCloud::from_parts(xyz, intensity, None)?,
        clamped,
    })
}

pub fn load_cloud(
    path: &Path,
    record: PointRecord,
    intensity_max: f64,
) -> Result<LoadedCloud, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_cloud(&bytes, record, intensity_max, path)
}

/// Encode a cloud as packed little-endian `f32`. `XYZI` needs an intensity
/// channel.
pub fn encode_cloud(cloud: &PointCloud, record: PointRecord) -> Result<Vec<u8>, IngestError> {
    let intensity = match record {
        PointRecord::XYZ => None,
        PointRecord::XYZI => Some(cloud.intensity().ok_or_else(|| IngestError::Format {
            path: PathBuf::new(),
            msg: "XYZI record requested for a cloud without intensity".into(),
        })?),
    };
    let mut out = Vec::with_capacity(cloud.len() * record.bytes());
    for (i, p) in cloud.xyz().iter().enumerate() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(inten) = intensity {
            out.extend_from_slice(&(inten[i] as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_cloud(
    path: &Path,
    cloud: &PointCloud,
    record: PointRecord,
) -> Result<(), IngestError> {
    let bytes = encode_cloud(cloud, record).map_err(|e| match e {
        IngestError::Format { msg, .. } => IngestError::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })?;
    write_file(path, &bytes)
}

/// Write a one-byte-per-point channel (sensor ids, provenance tags).
pub fn write_byte_channel(path: &Path, values: &[u8]) -> Result<(), IngestError> {
    write_file(path, values)
}

pub fn load_byte_channel(path: &Path, expected_len: usize) -> Result<Vec<u8>, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected_len {
        return Err(IngestError::Format {
            path: path.to_path_buf(),
            msg: format!("{} entries for {expected_len} points", bytes.len()),
        });
    }
    Ok(bytes)
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, root: impl Into<PathBuf>) -> Self {
        Self {
            manifest,
            root: root.into(),
        }
    }

    pub fn load(manifest_path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| IngestError::Parse {
                path: manifest_path.to_path_buf(),
                line: e.line(),
                column: e.column(),
                msg: e.to_string(),
            })?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self { manifest, root })
    }

    pub fn manifest_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serialization");
        s.push('\n');
        s
    }

    /// Write `manifest.json` into the root directory.
    pub fn save(&self) -> Result<PathBuf, IngestError> {
        let path = self.root.join("manifest.json");
        write_file(&path, self.manifest_json().as_bytes())?;
        Ok(path)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_frame(&self, rec: &FrameRecord) -> Result<Frame, IngestError> {
        let m = &self.manifest;
        let LoadedCloud { mut cloud, .. } = load_cloud(
            &self.path(&rec.cloud_path),
            m.point_record,
            m.native_intensity_max,
        )?;
        if let Some(sp) = &rec.sensor_path {
            let ids = load_byte_channel(&self.path(sp), cloud.len())?;
            cloud = cloud.with_sensor_id(Some(ids))?;
        }
        let ann = load_annotations(&self.path(&rec.annotation_path), &m.class_aliases)?;
        Ok(Frame::new(
            cloud,
            ann.boxes,
            m.kind,
            rec.sequence_id.clone(),
            rec.frame_id,
        ))
    }

    /// Write one frame's cloud, annotations and optional sensor sidecar at the
    /// record's paths.
    pub fn write_frame(&self, rec: &FrameRecord, frame: &Frame) -> Result<(), IngestError> {
        let record = match frame.cloud.intensity() {
            Some(_) => PointRecord::XYZI,
            None => PointRecord::XYZ,
        };
        if record != self.manifest.point_record {
            return Err(IngestError::Format {
                path: self.path(&rec.cloud_path),
                msg: format!(
                    "frame has {record:?} data but manifest declares {:?}",
                    self.manifest.point_record
                ),
            });
        }
        write_cloud(&self.path(&rec.cloud_path), &frame.cloud, record)?;
        write_annotations(
            &self.path(&rec.annotation_path),
            frame.frame_id,
            &self.manifest.name,
            &frame.labels,
        )?;
        if let (Some(sp), Some(ids)) = (&rec.sensor_path, frame.cloud.sensor_id()) {
            write_byte_channel(&self.path(sp), ids)?;
        }
        Ok(())
    }

    /// Load every frame in manifest order, in parallel; errors are aggregated.
    pub fn load_all(&self) -> Result<Vec<Frame>, IngestError> {
        let results: Vec<_> = self
            .manifest
            .frames
            .par_iter()
            .map(|rec| {
                self.load_frame(rec)
                    .map_err(|e| (self.path(&rec.cloud_path), e.to_string()))
            })
            .collect();
        collect_aggregated(results)
    }
}

fn collect_aggregated<T>(
    results: Vec<Result<T, (PathBuf, String)>>,
) -> Result<Vec<T>, IngestError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(f) => failures.push(f),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(IngestError::Unreadable(failures))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub car: usize,
    pub pedestrian: usize,
}

impl ClassCounts {
    pub fn add(&mut self, class: ObjectClass) {
        match class {
            ObjectClass::Car => self.car += 1,
            ObjectClass::Pedestrian => self.pedestrian += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.car + self.pedestrian
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub frames: SplitCounts,
    pub labels: ClassCounts,
}

/// Frame counts per split and label counts per class, the latter after the
/// dataset's filter plan when `filters` is given.
pub fn dataset_stats(
    dataset: &Dataset,
    filters: Option<&FilterConfig>,
) -> Result<DatasetStats, IngestError> {
    let plan = filters.map(|f| f.plan_for(&dataset.manifest)).transpose()?;
    let per_frame: Vec<_> = dataset
        .manifest
        .frames
        .par_iter()
        .map(|rec| {
            let fail = |e: String| (dataset.path(&rec.cloud_path), e);
            let frame = dataset.load_frame(rec).map_err(|e| fail(e.to_string()))?;
            let frame = match &plan {
                Some(p) => p.apply(&frame).map_err(|e| fail(e.to_string()))?,
                None => frame,
            };
            let mut c = ClassCounts::default();
            frame.labels.iter().for_each(|l| c.add(l.class));
            Ok(c)
        })
        .collect();
    let counts = collect_aggregated(per_frame)?;
    let mut stats = DatasetStats {
        frames: dataset.manifest.count_splits(),
        ..Default::default()
    };
    for c in counts {
        stats.labels.car += c.car;
        stats.labels.pedestrian += c.pedestrian;
    }
    Ok(stats)
}
