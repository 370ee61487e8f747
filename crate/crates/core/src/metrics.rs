//! Detection matching, AP40, the Closed Gap score and point-cloud statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::Frame;
use crate::pcgeom::{iou_3d, iou_bev, Box3D, LabeledBox, ObjectClass};

/// Number of evenly spaced recall positions.
pub const RECALL_POSITIONS: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no ground truth: AP is undefined")]
    NoGroundTruth,
    #[error("degenerate gap: oracle AP equals source-only AP ({0})")]
    DegenerateGap(f64),
    #[error("frame sets differ: missing detections for {missing_dets:?}, missing ground truth for {missing_gts:?}")]
    Alignment {
        missing_dets: Vec<String>,
        missing_gts: Vec<String>,
    },
    #[error("detection {index} in frame {frame} has no score")]
    MissingScore { frame: String, index: usize },
    #[error("IoU threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("no points selected")]
    NoPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IouMode {
    #[serde(rename = "BEV")]
    Bev,
    Full3D,
}

impl IouMode {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouMode::Bev => iou_bev(a, b),
            IouMode::Full3D => iou_3d(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub score: f64,
}

impl Detection {
    /// Detection view of a scored label; `None` when the score is missing.
    pub fn from_labeled(l: &LabeledBox) -> Option<Self> {
        l.score.map(|score| Self {
            bbox: l.bbox,
            class: l.class,
            score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// True positive flag per detection, in input order.
    pub det_tp: Vec<bool>,
    /// Whether each ground-truth box was matched, in input order.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.det_tp.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.det_tp.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// Greedy matching in descending score order (ties by input order). Each
/// detection takes the unmatched same-class ground truth with the highest
/// IoU at or above `threshold`; IoU ties go to the lower index.
pub fn match_detections<F>(
    dets: &[Detection],
    gts: &[LabeledBox],
    iou: F,
    threshold: f64,
) -> MatchResult
where
    F: Fn(&Box3D, &Box3D) -> f64,
{
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut det_tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.class != det.class {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            det_tp[d] = true;
        }
    }
    MatchResult { det_tp, gt_matched }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredFlag {
    pub score: f64,
    pub tp: bool,
}

/// AP over 40 recall positions, in `[0, 100]`.
///
/// Detections are sorted globally by descending score (stable, so ties keep
/// input order). For each recall level `r = k/40` the interpolated precision
/// is the best precision among cut-offs whose recall reaches `r`.
pub fn ap40(flags: &[ScoredFlag], total_gt: usize) -> Result<f64, MetricsError> {
    if total_gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let n = sorted.len();
    let mut tp_at = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, f) in sorted.iter().enumerate() {
        if f.tp {
            tp += 1;
        }
        tp_at.push(tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Best precision over every cut-off at or after position k.
    let mut suffix_max = precision.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        suffix_max[k] = suffix_max[k].max(suffix_max[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0usize;
    for r in 1..=RECALL_POSITIONS {
        // recall(k) >= r/40  <=>  40 * tp >= r * total_gt
        while k < n && RECALL_POSITIONS * tp_at[k] < r * total_gt {
            k += 1;
        }
        if k == n {
            break;
        }
        sum += suffix_max[k];
    }
    Ok(100.0 * sum / RECALL_POSITIONS as f64)
}

/// Share of the source-only to oracle gap recovered by a model, in percent.
/// Not clamped: adapted models can beat the oracle.
pub fn closed_gap(ap_model: f64, ap_source_only: f64, ap_oracle: f64) -> Result<f64, MetricsError> {
    let denom = ap_oracle - ap_source_only;
    if denom == 0.0 {
        return Err(MetricsError::DegenerateGap(ap_oracle));
    }
    Ok((ap_model - ap_source_only) / denom * 100.0)
}

fn default_thresholds() -> BTreeMap<ObjectClass, Vec<f64>> {
    [
        (ObjectClass::Car, vec![0.7, 0.5]),
        (ObjectClass::Pedestrian, vec![0.5, 0.25]),
    ]
    .into_iter()
    .collect()
}

fn default_modes() -> Vec<IouMode> {
    vec![IouMode::Bev, IouMode::Full3D]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_thresholds")]
    pub thresholds: BTreeMap<ObjectClass, Vec<f64>>,
    #[serde(default = "default_modes")]
    pub modes: Vec<IouMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            modes: default_modes(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for &t in self.thresholds.values().flatten() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(MetricsError::BadThreshold(t));
            }
        }
        Ok(())
    }
}

/// Boxes of one frame, keyed by sequence and frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBoxes {
    pub sequence_id: String,
    pub frame_id: u64,
    pub boxes: Vec<LabeledBox>,
}

impl FrameBoxes {
    pub fn key(&self) -> String {
        format!("{}/{}", self.sequence_id, self.frame_id)
    }
}

impl From<&Frame> for FrameBoxes {
    fn from(f: &Frame) -> Self {
        Self {
            sequence_id: f.sequence_id.clone(),
            frame_id: f.frame_id,
            boxes: f.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// AP for one (class, threshold, mode). `ap` is `None` when there is no
/// ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<MatchCounts>,
}

impl ApCell {
    pub fn value(ap: f64) -> Self {
        Self {
            ap: Some(ap),
            counts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GapPair {
    pub bev: Option<f64>,
    pub full3d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub class: ObjectClass,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bev: Option<ApCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full3d: Option<ApCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_gap: Option<GapPair>,
}

impl EvalEntry {
    pub fn cell(&self, mode: IouMode) -> Option<&ApCell> {
        match mode {
            IouMode::Bev => self.bev.as_ref(),
            IouMode::Full3D => self.full3d.as_ref(),
        }
    }

    fn cell_mut(&mut self, mode: IouMode) -> &mut Option<ApCell> {
        match mode {
            IouMode::Bev => &mut self.bev,
            IouMode::Full3D => &mut self.full3d,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn entry(&self, class: ObjectClass, threshold: f64) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.class == class && e.threshold == threshold)
    }

    /// Fill in Closed-Gap pairs against the given baselines. Cells missing
    /// from either baseline, or with a degenerate gap, stay `None`.
    pub fn attach_closed_gap(&mut self, source_only: &EvalReport, oracle: &EvalReport) {
        for e in &mut self.entries {
            let (Some(s), Some(o)) = (
                source_only.entry(e.class, e.threshold),
                oracle.entry(e.class, e.threshold),
            ) else {
                continue;
            };
            let gap = |mode: IouMode| -> Option<f64> {
                let m = e.cell(mode)?.ap?;
                let s = s.cell(mode)?.ap?;
                let o = o.cell(mode)?.ap?;
                match closed_gap(m, s, o) {
                    Ok(g) => Some(g),
                    Err(err) => {
                        log::warn!("{} @ {}: {err}", e.class, e.threshold);
                        None
                    }
                }
            };
            e.closed_gap = Some(GapPair {
                bev: gap(IouMode::Bev),
                full3d: gap(IouMode::Full3D),
            });
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

/// AP BEV / AP 3D (and Closed Gap when baselines are given) per class and
/// threshold.
pub fn evaluate(
    dets: &[FrameBoxes],
    gts: &[FrameBoxes],
    cfg: &EvalConfig,
    baselines: Option<(&EvalReport, &EvalReport)>,
) -> Result<EvalReport, MetricsError> {
    cfg.validate()?;
    let det_keys: BTreeSet<String> = dets.iter().map(FrameBoxes::key).collect();
    let gt_keys: BTreeSet<String> = gts.iter().map(FrameBoxes::key).collect();
    if det_keys != gt_keys {
        return Err(MetricsError::Alignment {
            missing_dets: gt_keys.difference(&det_keys).cloned().collect(),
            missing_gts: det_keys.difference(&gt_keys).cloned().collect(),
        });
    }
    let det_by_key: BTreeMap<String, Vec<Detection>> = dets
        .iter()
        .map(|f| {
            let d = f
                .boxes
                .iter()
                .enumerate()
                .map(|(index, b)| {
                    Detection::from_labeled(b).ok_or_else(|| MetricsError::MissingScore {
                        frame: f.key(),
                        index,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((f.key(), d))
        })
        .collect::<Result<_, MetricsError>>()?;

    let mut entries = Vec::new();
    for (&class, thresholds) in &cfg.thresholds {
        for &threshold in thresholds {
            let mut entry = EvalEntry {
                class,
                threshold,
                bev: None,
                full3d: None,
                closed_gap: None,
            };
            for &mode in &cfg.modes {
                let per_frame: Vec<(Vec<ScoredFlag>, usize, MatchCounts)> = gts
                    .par_iter()
                    .map(|g| {
                        let gt: Vec<LabeledBox> = g
                            .boxes
                            .iter()
                            .filter(|b| b.class == class)
                            .copied()
                            .collect();
                        let d: Vec<Detection> = det_by_key[&g.key()]
                            .iter()
                            .filter(|d| d.class == class)
                            .copied()
                            .collect();
                        let m = match_detections(&d, &gt, |a, b| mode.iou(a, b), threshold);
                        let flags = d
                            .iter()
                            .zip(&m.det_tp)
                            .map(|(d, &tp)| ScoredFlag { score: d.score, tp })
                            .collect();
                        let counts = MatchCounts {
                            tp: m.tp(),
                            fp: m.fp(),
                            fn_: m.fn_count(),
                        };
                        (flags, gt.len(), counts)
                    })
                    .collect();
                let mut flags = Vec::new();
                let mut total_gt = 0;
                let mut counts = MatchCounts::default();
                for (f, n, c) in per_frame {
                    flags.extend(f);
                    total_gt += n;
                    counts.tp += c.tp;
                    counts.fp += c.fp;
                    counts.fn_ += c.fn_;
                }
                *entry.cell_mut(mode) = Some(ApCell {
                    ap: ap40(&flags, total_gt).ok(),
                    counts: Some(counts),
                });
            }
            entries.push(entry);
        }
    }
    let mut report = EvalReport { entries };
    if let Some((s, o)) = baselines {
        report.attach_closed_gap(s, o);
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Plain-text table: one row per (method, stage) report, with AP BEV, AP 3D
/// and "gapBEV / gap3D" columns for each class and threshold.
pub fn render_table(rows: &[(&str, &str, &EvalReport)], cfg: &EvalConfig) -> String {
    let columns: Vec<(ObjectClass, f64)> = cfg
        .thresholds
        .iter()
        .flat_map(|(&c, ts)| ts.iter().map(move |&t| (c, t)))
        .collect();
    let mut header1 = format!("{:<12} {:<8}", "Method", "Stage");
    let mut header2 = format!("{:<12} {:<8}", "", "");
    for (c, t) in &columns {
        let _ = write!(header1, " | {:<33}", format!("{c} {t}"));
        let _ = write!(
            header2,
            " | {:>7} {:>7} {:>17}",
            "AP BEV", "AP 3D", "Closed Gap"
        );
    }
    let mut out = String::new();
    let _ = writeln!(out, "{header1}");
    let _ = writeln!(out, "{header2}");
    let _ = writeln!(out, "{}", "-".repeat(header2.len()));
    for (method, stage, report) in rows {
        let _ = write!(out, "{method:<12} {stage:<8}");
        for &(c, t) in &columns {
            let e = report.entry(c, t);
            let ap = |m: IouMode| fmt_opt(e.and_then(|e| e.cell(m)).and_then(|c| c.ap));
            let gap = e
                .and_then(|e| e.closed_gap)
                .map(|g| format!("{} / {}", fmt_opt(g.bev), fmt_opt(g.full3d)))
                .unwrap_or_else(|| "-".to_string());
            let _ = write!(
                out,
                " | {:>7} {:>7} {:>17}",
                ap(IouMode::Bev),
                ap(IouMode::Full3D),
                gap
            );
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation; `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} m \u{b1} {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudStats {
    pub points: usize,
    /// Point z.
    pub height: MeanStd,
    /// Euclidean distance from the sensor origin.
    pub range: MeanStd,
}

impl fmt::Display for CloudStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "points: {}, height: {}, range: {}",
            self.points, self.height, self.range
        )
    }
}

/// Height and range statistics over all points, or only over points inside
/// any box of `class`.
pub fn cloud_stats(
    frames: &[Frame],
    class: Option<ObjectClass>,
) -> Result<CloudStats, MetricsError> {
    let mut heights = Vec::new();
    let mut ranges = Vec::new();
    for frame in frames {
        let boxes: Vec<&Box3D> = match class {
            Some(c) => frame
                .labels
                .iter()
                .filter(|l| l.class == c)
                .map(|l| &l.bbox)
                .collect(),
            None => Vec::new(),
        };
        for p in frame.cloud.xyz() {
            if class.is_some() && !boxes.iter().any(|b| b.contains(p)) {
                continue;
            }
            heights.push(p[2]);
            ranges.push((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
        }
    }
    match (MeanStd::of(&heights), MeanStd::of(&ranges)) {
        (Some(height), Some(range)) => Ok(CloudStats {
            points: heights.len(),
            height,
            range,
        }),
        _ => Err(MetricsError::NoPoints),
    }
}
