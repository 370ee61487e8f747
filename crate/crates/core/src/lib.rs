//! Railway LiDAR domain-adaptation data pipeline.
//!
//! * [`pcgeom`]: oriented boxes, point clouds, BEV/3D IoU.
//! * [`ingest`]: manifests, annotation/cloud formats, split assignment.
//! * [`filters`]: per-frame harmonization (range, frustum, ground, min points, intensity).
//! * [`augment`]: inter-domain CutMix and intra-domain MixUp with size-aware source sampling.
//! * [`metrics`]: detection matching, AP40, Closed Gap, cloud statistics.
//! * [`scenegen`]: deterministic synthetic scenes and brute-force oracles.

pub mod augment;
pub mod filters;
pub mod ingest;
pub mod metrics;
pub mod pcgeom;
pub mod scenegen;

pub use filters::{Frame, RangeBox};
pub use ingest::{
    Dataset, DatasetManifest, DomainKind, FrameRecord, IntensityMode, PointRecord, Split,
};
pub use pcgeom::{Box3D, LabeledBox, ObjectClass, Point3, PointCloud};
