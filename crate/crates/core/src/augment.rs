//! Inter-domain CutMix and intra-domain MixUp for domain adaptation.
//!
//! CutMix cuts a BEV rectangle out of a *source* frame and pastes it into a
//! *target* frame, so the hybrid keeps the target's railway surroundings.
//! Before pasting, the cut is shifted horizontally so its center lands on
//! the target point nearest to it; the cut must contain at least one
//! ground-truth box center. With several sources, the source is chosen with
//! probability proportional to its training-set size.
//!
//! MixUp subsamples two target frames (one with ground truth, one with
//! filtered pseudo-labels) by a Beta-distributed ratio and merges them.
//!
//! Every random decision draws from an explicit per-frame RNG stream, see
//! [`frame_rng`].

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::Frame;
use crate::pcgeom::{count_points_in_box, LabeledBox, PointCloud, TranslateHorizontal};

/// RNG used for every augmentation decision.
pub type AugRng = ChaCha8Rng;

/// Provenance tag of points and labels from the target frame.
pub const TAG_TARGET: u8 = 0;
/// Provenance tag of points and labels from the MixUp partner frame.
pub const TAG_PARTNER: u8 = 255;

/// Provenance tag for source `index` of the pool.
pub fn source_tag(index: usize) -> u8 {
    u8::try_from(index + 1)
        .ok()
        .filter(|&t| t != TAG_PARTNER)
        .expect("source pools are limited to 254 entries")
}

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("invalid cut region: {0}")]
    BadRegion(String),
    #[error("source frame {0} has no labels to cut")]
    NoLabels(String),
    #[error("no region containing a ground-truth box center found in {0} attempts")]
    RegionSearchExhausted(usize),
    #[error("target frame {0} has no points")]
    EmptyTarget(String),
    #[error("frame {0} has no points")]
    EmptyFrame(String),
    #[error("box {index} has no score")]
    MissingScore { index: usize },
    #[error("intensity channel present on one side of the mix only")]
    ChannelMismatch,
    #[error("source pool: {0}")]
    Pool(String),
    #[error("frame provider: {0}")]
    Provider(String),
}

fn frame_name(f: &Frame) -> String {
    format!("{}/{}", f.sequence_id, f.frame_id)
}

/// Axis-aligned BEV rectangle given by center and half-widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutRegion {
    pub center: [f64; 2],
    pub extent: [f64; 2],
}

impl CutRegion {
    pub fn new(center: [f64; 2], extent: [f64; 2]) -> Result<Self, AugmentError> {
        if !center.iter().all(|v| v.is_finite()) {
            return Err(AugmentError::BadRegion("non-finite center".into()));
        }
        if !extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(AugmentError::BadRegion(format!(
                "extents {extent:?} must be positive"
            )));
        }
        Ok(Self { center, extent })
    }

    /// Closed containment of a planar position.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).abs() <= self.extent[0] && (y - self.center[1]).abs() <= self.extent[1]
    }

    pub fn shifted(&self, v: [f64; 2]) -> Self {
        Self {
            center: [self.center[0] + v[0], self.center[1] + v[1]],
            extent: self.extent,
        }
    }
}

fn default_p_cutmix() -> f64 {
    0.30
}
fn default_p_mixup() -> f64 {
    0.50
}
fn default_half_extent() -> [f64; 2] {
    [3.0, 15.0]
}
fn default_attempts() -> usize {
    50
}
fn default_alpha() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    0.6
}

/// Augmentation parameters. Besides the two firing probabilities, the
/// defaults are tuning constants of this implementation: half-extents drawn
/// from 3..15 m, 50 region attempts, `Beta(1, 1)` mixing ratio and a 0.6
/// pseudo-label score threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    #[serde(default = "default_p_cutmix")]
    pub p_cutmix: f64,
    #[serde(default = "default_p_mixup")]
    pub p_mixup: f64,
    /// Bounds `[min, max]` of each region half-width, meters.
    #[serde(default = "default_half_extent")]
    pub region_half_extent: [f64; 2],
    #[serde(default = "default_attempts")]
    pub max_region_attempts: usize,
    #[serde(default = "default_alpha")]
    pub mixup_alpha: f64,
    #[serde(default = "default_tau")]
    pub pseudo_score_threshold: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            p_cutmix: default_p_cutmix(),
            p_mixup: default_p_mixup(),
            region_half_extent: default_half_extent(),
            max_region_attempts: default_attempts(),
            mixup_alpha: default_alpha(),
            pseudo_score_threshold: default_tau(),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Config(m));
        for (name, p) in [("p_cutmix", self.p_cutmix), ("p_mixup", self.p_mixup)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        let [lo, hi] = self.region_half_extent;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!(
                "region_half_extent {:?} must satisfy 0 < min <= max",
                self.region_half_extent
            ));
        }
        if self.max_region_attempts == 0 {
            return bad("max_region_attempts must be at least 1".into());
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return bad(format!("mixup_alpha {} must be positive", self.mixup_alpha));
        }
        if !(0.0..=1.0).contains(&self.pseudo_score_threshold) {
            return bad(format!(
                "pseudo_score_threshold {} outside [0, 1]",
                self.pseudo_score_threshold
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub name: String,
    /// Training-split frame count.
    pub train_frames: usize,
}

/// Source datasets available to CutMix.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePool {
    entries: Vec<SourceEntry>,
    total: usize,
}

impl SourcePool {
    pub fn new(entries: Vec<SourceEntry>) -> Result<Self, AugmentError> {
        if entries.is_empty() {
            return Err(AugmentError::Pool("at least one source is required".into()));
        }
        if entries.len() > 254 {
            return Err(AugmentError::Pool(
                "at most 254 sources are supported".into(),
            ));
        }
        if let Some(e) = entries.iter().find(|e| e.train_frames == 0) {
            return Err(AugmentError::Pool(format!(
                "source {:?} has no training frames",
                e.name
            )));
        }
        let total = entries.iter().map(|e| e.train_frames).sum();
        Ok(Self { entries, total })
    }

    pub fn entries(&self) -> &[SourceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Selection probability of each source.
    pub fn probabilities(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| e.train_frames as f64 / self.total as f64)
            .collect()
    }
}

/// Pick source `i` with probability `n_i / sum(n)`.
pub fn size_aware_pick<R: Rng + ?Sized>(pool: &SourcePool, rng: &mut R) -> usize {
    let mut u = rng.random_range(0..pool.total);
    for (i, e) in pool.entries.iter().enumerate() {
        if u < e.train_frames {
            return i;
        }
        u -= e.train_frames;
    }
    unreachable!("draw below the pool total")
}

/// Sample a region that holds at least one ground-truth box center.
///
/// The center is uniform over the cloud's BEV bounding box (the label
/// centers' when the cloud is empty) and each half-width uniform within the
/// configured bounds.
pub fn select_cut_region<R: Rng + ?Sized>(
    source: &Frame,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<CutRegion, AugmentError> {
    if source.labels.is_empty() {
        return Err(AugmentError::NoLabels(frame_name(source)));
    }
    let centers: Vec<[f64; 2]> = source
        .labels
        .iter()
        .map(|l| {
            let c = l.bbox.center();
            [c[0], c[1]]
        })
        .collect();
    let planar: Box<dyn Iterator<Item = [f64; 2]>> = if source.cloud.is_empty() {
        Box::new(centers.iter().copied())
    } else {
        Box::new(source.cloud.xyz().iter().map(|p| [p[0], p[1]]))
    };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in planar {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let [emin, emax] = cfg.region_half_extent;
    for _ in 0..cfg.max_region_attempts {
        let center = [
            rng.random_range(lo[0]..=hi[0]),
            rng.random_range(lo[1]..=hi[1]),
        ];
        let extent = [rng.random_range(emin..=emax), rng.random_range(emin..=emax)];
        let region = CutRegion::new(center, extent)?;
        if centers.iter().any(|c| region.contains(c[0], c[1])) {
            return Ok(region);
        }
    }
    Err(AugmentError::RegionSearchExhausted(cfg.max_region_attempts))
}

/// Result of one CutMix, with the index bookkeeping needed for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMixOutput {
    /// Kept target points first, then the shifted source points.
    pub frame: Frame,
    pub translation: [f64; 2],
    /// The cut region after translation.
    pub footprint: CutRegion,
    pub kept_target_points: Vec<usize>,
    pub cut_source_points: Vec<usize>,
    pub kept_target_labels: Vec<usize>,
    pub cut_source_labels: Vec<usize>,
}

fn nearest_planar(cloud: &PointCloud, c: [f64; 2]) -> Option<[f64; 2]> {
    cloud
        .xyz()
        .iter()
        .map(|p| {
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            (d, [p[0], p[1]])
        })
        .fold(None, |best: Option<(f64, [f64; 2])>, cur| match best {
            Some(b) if b.0 <= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, p)| p)
}

fn concat_clouds(a: &PointCloud, b: &PointCloud) -> Result<PointCloud, AugmentError> {
    if a.intensity().is_some() != b.intensity().is_some() {
        return Err(AugmentError::ChannelMismatch);
    }
    Ok(a.concat(b))
}

/// Paste `region` of `source` into `target`.
///
/// The cut (points with planar position in the region plus labels with
/// centers in it) is shifted by the vector from the region center to the
/// nearest target point. Target points and label centers under the shifted
/// footprint are removed before the paste. The output keeps the target's
/// identity and domain.
pub fn cutmix(
    source: &Frame,
    target: &Frame,
    region: &CutRegion,
) -> Result<CutMixOutput, AugmentError> {
    let anchor = nearest_planar(&target.cloud, region.center)
        .ok_or_else(|| AugmentError::EmptyTarget(frame_name(target)))?;
    let translation = [anchor[0] - region.center[0], anchor[1] - region.center[1]];
    let footprint = region.shifted(translation);

    let cut_source_points: Vec<usize> = (0..source.cloud.len())
        .filter(|&i| {
            let p = source.cloud.xyz()[i];
            region.contains(p[0], p[1])
        })
        .collect();
    let cut_source_labels: Vec<usize> = (0..source.labels.len())
        .filter(|&i| {
            let c = source.labels[i].bbox.center();
            region.contains(c[0], c[1])
        })
        .collect();
    let kept_target_points: Vec<usize> = (0..target.cloud.len())
        .filter(|&i| {
            let p = target.cloud.xyz()[i];
            !footprint.contains(p[0], p[1])
        })
        .collect();
    let kept_target_labels: Vec<usize> = (0..target.labels.len())
        .filter(|&i| {
            let c = target.labels[i].bbox.center();
            !footprint.contains(c[0], c[1])
        })
        .collect();

    let pasted = source
        .cloud
        .select(&cut_source_points)
        .translate_horizontal(translation);
    let cloud = concat_clouds(&target.cloud.select(&kept_target_points), &pasted)?;
    let labels = kept_target_labels
        .iter()
        .map(|&i| target.labels[i])
        .chain(
            cut_source_labels
                .iter()
                .map(|&i| source.labels[i].translate_horizontal(translation)),
        )
        .collect();
    Ok(CutMixOutput {
        frame: Frame::new(
            cloud,
            labels,
            target.domain,
            target.sequence_id.clone(),
            target.frame_id,
        ),
        translation,
        footprint,
        kept_target_points,
        cut_source_points,
        kept_target_labels,
        cut_source_labels,
    })
}

/// Keep pseudo-labels scoring at least `tau`. Every box must carry a score.
pub fn pseudo_label_filter(
    boxes: &[LabeledBox],
    tau: f64,
) -> Result<Vec<LabeledBox>, AugmentError> {
    let mut out = Vec::with_capacity(boxes.len());
    for (index, b) in boxes.iter().enumerate() {
        let s = b.score.ok_or(AugmentError::MissingScore { index })?;
        if s >= tau {
            out.push(*b);
        }
    }
    Ok(out)
}

/// Result of one MixUp.
#[derive(Debug, Clone, PartialEq)]
pub struct MixUpOutput {
    /// Kept points of `a` first, then those of `b`.
    pub frame: Frame,
    pub lambda: f64,
    pub kept_a: Vec<usize>,
    pub kept_b: Vec<usize>,
    /// Labels of `b` that still hold at least one kept point of `b`.
    pub kept_b_labels: Vec<usize>,
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = sample_indices(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// MixUp with a given ratio: `floor(lambda |A|)` uniformly chosen points of
/// `a` and `floor((1 - lambda) |B|)` of `b`. All labels of `a` are kept,
/// labels of `b` only if they still contain a kept point of `b`.
pub fn pointmixup_with_lambda<R: Rng + ?Sized>(
    a: &Frame,
    b: &Frame,
    lambda: f64,
    rng: &mut R,
) -> Result<MixUpOutput, AugmentError> {
    for f in [a, b] {
        if f.cloud.is_empty() {
            return Err(AugmentError::EmptyFrame(frame_name(f)));
        }
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::Config(format!(
            "mixing ratio {lambda} outside [0, 1]"
        )));
    }
    let na = (lambda * a.cloud.len() as f64).floor() as usize;
    let nb = ((1.0 - lambda) * b.cloud.len() as f64).floor() as usize;
    let kept_a = sorted_sample(rng, a.cloud.len(), na);
    let kept_b = sorted_sample(rng, b.cloud.len(), nb);
    let b_cloud = b.cloud.select(&kept_b);
    let kept_b_labels: Vec<usize> = (0..b.labels.len())
        .filter(|&i| count_points_in_box(&b_cloud, &b.labels[i].bbox) >= 1)
        .collect();
    let cloud = concat_clouds(&a.cloud.select(&kept_a), &b_cloud)?;
    let labels = a
        .labels
        .iter()
        .copied()
        .chain(kept_b_labels.iter().map(|&i| b.labels[i]))
        .collect();
    Ok(MixUpOutput {
        frame: Frame::new(cloud, labels, a.domain, a.sequence_id.clone(), a.frame_id),
        lambda,
        kept_a,
        kept_b,
        kept_b_labels,
    })
}

/// MixUp with `lambda ~ Beta(alpha, alpha)`.
pub fn pointmixup<R: Rng + ?Sized>(
    a: &Frame,
    b: &Frame,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<MixUpOutput, AugmentError> {
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
        .map_err(|e| AugmentError::Config(e.to_string()))?;
    let lambda = beta.sample(rng);
    pointmixup_with_lambda(a, b, lambda, rng)
}

/// Supplies source frames for CutMix.
pub trait SourceFrames {
    /// A training frame of source `source` to cut from, for `target`.
    fn source_frame(
        &self,
        source: usize,
        target: &Frame,
        rng: &mut AugRng,
    ) -> Result<Frame, AugmentError>;
}

/// Supplies pseudo-labeled target frames for MixUp.
pub trait MixupPartners {
    /// A partner for `target`, or `None` if there is none available.
    fn partner(&self, target: &Frame, rng: &mut AugRng) -> Result<Option<Frame>, AugmentError>;
}

/// Source frames held in memory, one list per pool entry; picks uniformly.
#[derive(Debug, Clone)]
pub struct InMemorySources(pub Vec<Vec<Frame>>);

impl SourceFrames for InMemorySources {
    fn source_frame(
        &self,
        source: usize,
        _target: &Frame,
        rng: &mut AugRng,
    ) -> Result<Frame, AugmentError> {
        let frames = self
            .0
            .get(source)
            .filter(|f| !f.is_empty())
            .ok_or_else(|| AugmentError::Provider(format!("no frames for source {source}")))?;
        Ok(frames[rng.random_range(0..frames.len())].clone())
    }
}

/// Partner frames held in memory; picks uniformly, never the target itself.
#[derive(Debug, Clone)]
pub struct InMemoryPartners(pub Vec<Frame>);

impl MixupPartners for InMemoryPartners {
    fn partner(&self, target: &Frame, rng: &mut AugRng) -> Result<Option<Frame>, AugmentError> {
        let candidates: Vec<&Frame> = self
            .0
            .iter()
            .filter(|f| !(f.sequence_id == target.sequence_id && f.frame_id == target.frame_id))
            .collect();
        if candidates.is_empty() {
            return Ok(None);
        }
        Ok(Some(
            candidates[rng.random_range(0..candidates.len())].clone(),
        ))
    }
}

/// A fixed shuffle of each source's frame indices for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOrder {
    orders: Vec<Vec<usize>>,
}

impl EpochOrder {
    pub fn new(sizes: &[usize], seed: u64, epoch: u64) -> Self {
        let mut rng = AugRng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let orders = sizes
            .iter()
            .map(|&n| {
                let mut v: Vec<usize> = (0..n).collect();
                v.shuffle(&mut rng);
                v
            })
            .collect();
        Self { orders }
    }

    /// Frame index for the `ordinal`-th draw from `source`.
    pub fn pick(&self, source: usize, ordinal: usize) -> Option<usize> {
        let o = self.orders.get(source)?;
        (!o.is_empty()).then(|| o[ordinal % o.len()])
    }
}

/// Stable 64-bit FNV-1a hash.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-frame RNG stream derived from the global seed and the frame identity.
pub fn frame_rng(seed: u64, sequence_id: &str, frame_id: u64) -> AugRng {
    let mut key = sequence_id.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(&frame_id.to_le_bytes());
    let mut rng = AugRng::seed_from_u64(seed);
    rng.set_stream(fnv1a(&key));
    rng
}

/// Per-point and per-label origin tags: [`TAG_TARGET`], [`source_tag`] or
/// [`TAG_PARTNER`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub points: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Provenance {
    pub fn uniform(frame: &Frame, tag: u8) -> Self {
        Self {
            points: vec![tag; frame.cloud.len()],
            labels: vec![tag; frame.labels.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CutMixStatus {
    NotFired,
    Applied {
        source: usize,
        source_sequence: String,
        source_frame: u64,
        region: CutRegion,
        translation: [f64; 2],
    },
    Skipped {
        source: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MixUpStatus {
    NotFired,
    Applied {
        partner_sequence: String,
        partner_frame: u64,
        lambda: f64,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFrame {
    pub frame: Frame,
    pub provenance: Provenance,
    pub cutmix: CutMixStatus,
    pub mixup: MixUpStatus,
}

/// Run CutMix (probability `p_cutmix`) and then, independently, MixUp
/// (probability `p_mixup`) on one target frame.
///
/// Both coin flips are drawn first so firing decisions do not depend on
/// what the stages consume from the stream. A CutMix whose source frame
/// has no labels, or whose region search runs out of attempts, is skipped
/// and reported; so is a MixUp without an available partner.
pub fn apply_pipeline<S: SourceFrames, P: MixupPartners>(
    target: &Frame,
    pool: &SourcePool,
    sources: &S,
    partners: &P,
    cfg: &AugConfig,
    rng: &mut AugRng,
) -> Result<AugmentedFrame, AugmentError> {
    cfg.validate()?;
    let fire_cutmix = rng.random_bool(cfg.p_cutmix);
    let fire_mixup = rng.random_bool(cfg.p_mixup);
    let mut frame = target.clone();
    let mut provenance = Provenance::uniform(target, TAG_TARGET);

    let cutmix_status = if fire_cutmix {
        let source = size_aware_pick(pool, rng);
        let src = sources.source_frame(source, target, rng)?;
        match select_cut_region(&src, cfg, rng) {
            Ok(region) => {
                let out = cutmix(&src, &frame, &region)?;
                let tag = source_tag(source);
                provenance = Provenance {
                    points: out
                        .kept_target_points
                        .iter()
                        .map(|&i| provenance.points[i])
                        .chain(std::iter::repeat_n(tag, out.cut_source_points.len()))
                        .collect(),
                    labels: out
                        .kept_target_labels
                        .iter()
                        .map(|&i| provenance.labels[i])
                        .chain(std::iter::repeat_n(tag, out.cut_source_labels.len()))
                        .collect(),
                };
                frame = out.frame;
                CutMixStatus::Applied {
                    source,
                    source_sequence: src.sequence_id.clone(),
                    source_frame: src.frame_id,
                    region,
                    translation: out.translation,
                }
            }
            Err(e @ (AugmentError::NoLabels(_) | AugmentError::RegionSearchExhausted(_))) => {
                log::debug!("cutmix skipped for {}: {e}", frame_name(target));
                CutMixStatus::Skipped {
                    source,
                    reason: e.to_string(),
                }
            }
            Err(e) => return Err(e),
        }
    } else {
        CutMixStatus::NotFired
    };

    let mixup_status = if fire_mixup {
        match partners.partner(target, rng)? {
            Some(mut partner) => {
                partner.labels = pseudo_label_filter(&partner.labels, cfg.pseudo_score_threshold)?;
                let out = pointmixup(&frame, &partner, cfg, rng)?;
                provenance = Provenance {
                    points: out
                        .kept_a
                        .iter()
                        .map(|&i| provenance.points[i])
                        .chain(std::iter::repeat_n(TAG_PARTNER, out.kept_b.len()))
                        .collect(),
                    labels: provenance
                        .labels
                        .iter()
                        .copied()
                        .chain(std::iter::repeat_n(TAG_PARTNER, out.kept_b_labels.len()))
                        .collect(),
                };
                frame = out.frame;
                MixUpStatus::Applied {
                    partner_sequence: partner.sequence_id,
                    partner_frame: partner.frame_id,
                    lambda: out.lambda,
                }
            }
            None => MixUpStatus::Skipped {
                reason: "no partner frame available".into(),
            },
        }
    } else {
        MixUpStatus::NotFired
    };

    Ok(AugmentedFrame {
        frame,
        provenance,
        cutmix: cutmix_status,
        mixup: mixup_status,
    })
}

/// Fire-rate counters over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub frames: usize,
    pub cutmix_fired: usize,
    pub cutmix_applied: usize,
    pub cutmix_skipped: usize,
    pub mixup_fired: usize,
    pub mixup_applied: usize,
    pub mixup_skipped: usize,
}

impl AugmentSummary {
    pub fn record(&mut self, a: &AugmentedFrame) {
        self.record_status(&a.cutmix, &a.mixup);
    }

    pub fn record_status(&mut self, cutmix: &CutMixStatus, mixup: &MixUpStatus) {
        self.frames += 1;
        match cutmix {
            CutMixStatus::NotFired => {}
            CutMixStatus::Applied { .. } => {
                self.cutmix_fired += 1;
                self.cutmix_applied += 1;
            }
            CutMixStatus::Skipped { .. } => {
                self.cutmix_fired += 1;
                self.cutmix_skipped += 1;
            }
        }
        match mixup {
            MixUpStatus::NotFired => {}
            MixUpStatus::Applied { .. } => {
                self.mixup_fired += 1;
                self.mixup_applied += 1;
            }
            MixUpStatus::Skipped { .. } => {
                self.mixup_fired += 1;
                self.mixup_skipped += 1;
            }
        }
    }

    pub fn cutmix_rate(&self) -> f64 {
        self.cutmix_fired as f64 / self.frames.max(1) as f64
    }

    pub fn mixup_rate(&self) -> f64 {
        self.mixup_fired as f64 / self.frames.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DomainKind;
    use crate::pcgeom::{Box3D, ObjectClass};

    fn car(x: f64, y: f64) -> LabeledBox {
        LabeledBox::ground_truth(
            Box3D::new([x, y, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap(),
            ObjectClass::Car,
        )
    }

    fn frame(points: Vec<[f64; 3]>, labels: Vec<LabeledBox>, id: u64) -> Frame {
        Frame::new(
            PointCloud::from_xyz(points).unwrap(),
            labels,
            DomainKind::RealRail,
            "t",
            id,
        )
    }

    fn rng(seed: u64) -> AugRng {
        AugRng::seed_from_u64(seed)
    }

    #[test]
    fn pick_single_source() {
        let pool = SourcePool::new(vec![SourceEntry {
            name: "a".into(),
            train_frames: 7,
        }])
        .unwrap();
        let mut r = rng(0);
        assert!((0..100).all(|_| size_aware_pick(&pool, &mut r) == 0));
    }

    #[test]
    fn pick_equal_sources() {
        let pool = SourcePool::new(vec![
            SourceEntry {
                name: "a".into(),
                train_frames: 10,
            },
            SourceEntry {
                name: "b".into(),
                train_frames: 10,
            },
        ])
        .unwrap();
        let mut r = rng(1);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| size_aware_pick(&pool, &mut r) == 1)
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits - 5000.0).abs() <= 3.0 * sigma, "{hits}");
    }

    #[test]
    fn pool_validation() {
        assert!(SourcePool::new(vec![]).is_err());
        assert!(SourcePool::new(vec![SourceEntry {
            name: "a".into(),
            train_frames: 0
        }])
        .is_err());
    }

    #[test]
    fn region_requires_labels() {
        let f = frame(vec![[0.0; 3]], vec![], 0);
        assert_eq!(
            select_cut_region(&f, &AugConfig::default(), &mut rng(0)),
            Err(AugmentError::NoLabels("t/0".into()))
        );
    }

    #[test]
    fn region_covering_cloud_contains_label() {
        let f = frame(
            vec![[0.0, 0.0, 0.0], [10.0, 5.0, 0.0]],
            vec![car(5.0, 2.0)],
            0,
        );
        let cfg = AugConfig {
            region_half_extent: [20.0, 20.0],
            ..Default::default()
        };
        let r = select_cut_region(&f, &cfg, &mut rng(2)).unwrap();
        assert!(r.contains(5.0, 2.0));
    }

    #[test]
    fn region_search_can_exhaust() {
        // Tiny regions over a huge cloud almost never hit the single center.
        let f = frame(
            vec![[0.0, -1000.0, 0.0], [1000.0, 1000.0, 0.0]],
            vec![car(500.0, 0.0)],
            0,
        );
        let cfg = AugConfig {
            region_half_extent: [0.01, 0.01],
            max_region_attempts: 5,
            ..Default::default()
        };
        assert_eq!(
            select_cut_region(&f, &cfg, &mut rng(3)),
            Err(AugmentError::RegionSearchExhausted(5))
        );
    }

    #[test]
    fn cutmix_zero_translation() {
        let source = frame(
            vec![[1.0, 0.0, 0.5], [9.0, 9.0, 0.0]],
            vec![car(1.0, 0.0)],
            1,
        );
        let target = frame(
            vec![[0.0, 0.0, 0.0], [1.5, 0.5, 0.2], [30.0, 0.0, 0.0]],
            vec![car(0.5, 0.0), car(30.0, 0.0)],
            2,
        );
        let region = CutRegion::new([0.0, 0.0], [2.0, 2.0]).unwrap();
        let out = cutmix(&source, &target, &region).unwrap();
        assert_eq!(out.translation, [0.0, 0.0]);
        assert_eq!(out.frame.cloud.xyz(), &[[30.0, 0.0, 0.0], [1.0, 0.0, 0.5]]);
        assert_eq!(out.frame.labels, vec![car(30.0, 0.0), car(1.0, 0.0)]);
        assert_eq!(out.frame.sequence_id, "t");
        assert_eq!(out.frame.frame_id, 2);
    }

    #[test]
    fn cutmix_shifts_to_nearest_target_point() {
        let source = frame(
            vec![[0.0, 0.0, 0.3], [0.5, 0.5, 0.3]],
            vec![car(0.0, 0.0)],
            1,
        );
        let target = frame(vec![[50.0, 1.0, 0.0], [80.0, 0.0, 0.0]], vec![], 2);
        let region = CutRegion::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let out = cutmix(&source, &target, &region).unwrap();
        assert_eq!(out.translation, [50.0, 1.0]);
        assert_eq!(out.footprint.center, [50.0, 1.0]);
        // the anchor itself lies inside the footprint and is replaced
        assert_eq!(out.kept_target_points, vec![1]);
        assert_eq!(out.frame.labels[0].bbox.center(), [50.0, 1.0, 0.8]);
        assert_eq!(out.frame.cloud.xyz()[1], [50.0, 1.0, 0.3]);
        let empty = frame(vec![], vec![], 3);
        assert!(matches!(
            cutmix(&source, &empty, &region),
            Err(AugmentError::EmptyTarget(_))
        ));
    }

    #[test]
    fn pseudo_filter_examples() {
        let s = |v: f64| LabeledBox {
            score: Some(v),
            ..car(0.0, 0.0)
        };
        let boxes = vec![s(0.9), s(0.59), s(0.61), s(1.0)];
        assert_eq!(pseudo_label_filter(&boxes, 0.0).unwrap(), boxes);
        assert_eq!(pseudo_label_filter(&boxes, 1.0).unwrap(), vec![s(1.0)]);
        assert_eq!(
            pseudo_label_filter(&boxes[..3], 0.6).unwrap(),
            vec![s(0.9), s(0.61)]
        );
        assert_eq!(
            pseudo_label_filter(&[car(0.0, 0.0)], 0.5),
            Err(AugmentError::MissingScore { index: 0 })
        );
    }

    #[test]
    fn mixup_boundaries() {
        let a = frame(
            (0..10).map(|i| [i as f64, 0.0, 0.5]).collect(),
            vec![car(2.0, 0.0)],
            1,
        );
        let b = frame(
            (0..8).map(|i| [i as f64 * 10.0, 0.0, 0.5]).collect(),
            vec![car(0.0, 0.0), car(500.0, 0.0)],
            2,
        );
        let one = pointmixup_with_lambda(&a, &b, 1.0, &mut rng(0)).unwrap();
        assert_eq!(one.frame, a);
        let zero = pointmixup_with_lambda(&a, &b, 0.0, &mut rng(0)).unwrap();
        assert_eq!(zero.frame.cloud, b.cloud);
        assert_eq!(zero.frame.labels, vec![a.labels[0], b.labels[0]]);
        let half = pointmixup_with_lambda(&a, &b, 0.5, &mut rng(0)).unwrap();
        assert_eq!(half.frame.cloud.len(), 5 + 4);
        let empty = frame(vec![], vec![], 3);
        assert!(matches!(
            pointmixup_with_lambda(&a, &empty, 0.5, &mut rng(0)),
            Err(AugmentError::EmptyFrame(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AugConfig::default().validate().is_ok());
        assert!(AugConfig {
            p_cutmix: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AugConfig {
            region_half_extent: [5.0, 1.0],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AugConfig {
            mixup_alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let parsed: AugConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, AugConfig::default());
    }

    #[test]
    fn frame_rng_streams_differ() {
        let mut a = frame_rng(7, "seq", 1);
        let mut b = frame_rng(7, "seq", 2);
        let mut a2 = frame_rng(7, "seq", 1);
        let x: u64 = a.random();
        assert_ne!(x, b.random::<u64>());
        assert_eq!(x, a2.random::<u64>());
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let e = EpochOrder::new(&[5, 3], 11, 0);
        let mut seen: Vec<usize> = (0..5).map(|k| e.pick(0, k).unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(e.pick(1, 3), e.pick(1, 0));
        assert_eq!(e.pick(2, 0), None);
    }
}
