use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use railmix_core::augment::{
    apply_pipeline, frame_rng, AugRng, AugmentError, AugmentSummary, CutMixStatus, EpochOrder,
    MixUpStatus, MixupPartners, SourceEntry, SourceFrames, SourcePool,
};
use railmix_core::ingest::{load_annotations, write_byte_channel, Dataset, FrameRecord, Split};
use railmix_core::Frame;

use crate::config::{PipelineConfig, Settings};
use crate::data::{records_of, to_json, write_bytes};
use crate::error::CliError;

type FrameKey = (String, u64);

fn key_of(f: &Frame) -> FrameKey {
    (f.sequence_id.clone(), f.frame_id)
}

/// Source frames loaded on demand, in a fixed per-epoch order indexed by
/// the target frame's position in the training list.
struct DiskSources {
    datasets: Vec<Dataset>,
    train: Vec<Vec<FrameRecord>>,
    order: EpochOrder,
    ordinals: HashMap<FrameKey, usize>,
}

impl SourceFrames for DiskSources {
    fn source_frame(
        &self,
        source: usize,
        target: &Frame,
        _rng: &mut AugRng,
    ) -> Result<Frame, AugmentError> {
        let ordinal = self.ordinals.get(&key_of(target)).copied().unwrap_or(0);
        let idx = self.order.pick(source, ordinal).ok_or_else(|| {
            AugmentError::Provider(format!("source {source} has no training frames"))
        })?;
        self.datasets[source]
            .load_frame(&self.train[source][idx])
            .map_err(|e| AugmentError::Provider(e.to_string()))
    }
}

/// Target training frames paired with pseudo-label files.
struct DiskPartners {
    dataset: Dataset,
    candidates: Vec<(FrameRecord, PathBuf)>,
    order: EpochOrder,
    ordinals: HashMap<FrameKey, usize>,
}

impl MixupPartners for DiskPartners {
    fn partner(&self, target: &Frame, _rng: &mut AugRng) -> Result<Option<Frame>, AugmentError> {
        let n = self.candidates.len();
        let ordinal = self.ordinals.get(&key_of(target)).copied().unwrap_or(0);
        let Some(first) = self.order.pick(0, ordinal) else {
            return Ok(None);
        };
        // First candidate in epoch order that is not the target itself.
        let pick = (0..n).map(|k| (first + k) % n).find(|&i| {
            let r = &self.candidates[i].0;
            !(r.sequence_id == target.sequence_id && r.frame_id == target.frame_id)
        });
        let Some(i) = pick else { return Ok(None) };
        let (rec, pseudo) = &self.candidates[i];
        let provider = |e: railmix_core::ingest::IngestError| AugmentError::Provider(e.to_string());
        let mut frame = self.dataset.load_frame(rec).map_err(provider)?;
        frame.labels = load_annotations(pseudo, &self.dataset.manifest.class_aliases)
            .map_err(provider)?
            .boxes;
        Ok(Some(frame))
    }
}

/// One line of the provenance log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvenanceEntry {
    pub sequence_id: String,
    pub frame_id: u64,
    pub points: usize,
    pub labels: usize,
    pub cutmix: CutMixStatus,
    pub mixup: MixUpStatus,
    /// Per-point origin file, written for modified frames only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentRun {
    pub seed: u64,
    pub sources: Vec<SourceEntry>,
    pub partner_frames: usize,
    pub summary: AugmentSummary,
    pub cutmix_rate: f64,
    pub mixup_rate: f64,
}

fn check_files(dataset: &Dataset, recs: &[FrameRecord]) -> Result<(), CliError> {
    let missing: Vec<String> = recs
        .iter()
        .flat_map(|r| {
            std::iter::once(&r.cloud_path)
                .chain(&r.sensor_path)
                .chain([&r.annotation_path])
        })
        .map(|p| dataset.path(p))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "{} missing file(s): {}",
            missing.len(),
            missing.join(", ")
        )))
    }
}

fn copy_file(from: &Path, to: &Path) -> Result<(), CliError> {
    let bytes = fs::read(from).map_err(|e| CliError::io(from, e))?;
    write_bytes(to, &bytes)
}

/// Augment the target training split into `<out>`.
///
/// Writes the augmented frames under the target's relative paths, a
/// `manifest.json`, per-point origin files for modified frames under
/// `provenance/`, `provenance.jsonl` with one line per frame and
/// `summary.json` with the fire-rate counters. Frames left untouched are
/// copied byte for byte.
pub fn cmd_augment(cfg: &PipelineConfig, settings: &Settings) -> Result<AugmentRun, CliError> {
    let seed = settings.require_seed()?;
    let target = Dataset::load(&cfg.target)?;
    target.manifest.validate()?;
    let train = records_of(&target, Split::Train);
    if train.is_empty() {
        return Err(CliError::Validation(format!(
            "target {:?} has no training frames",
            target.manifest.name
        )));
    }
    check_files(&target, &train)?;

    if cfg.sources.is_empty() {
        return Err(CliError::Config(
            "at least one source dataset is required".into(),
        ));
    }
    let mut datasets = Vec::new();
    let mut source_train = Vec::new();
    for path in &cfg.sources {
        let ds = Dataset::load(path)?;
        ds.manifest.validate()?;
        let recs = records_of(&ds, Split::Train);
        check_files(&ds, &recs)?;
        source_train.push(recs);
        datasets.push(ds);
    }
    let pool = SourcePool::new(
        datasets
            .iter()
            .zip(&source_train)
            .map(|(d, r)| SourceEntry {
                name: d.manifest.name.clone(),
                train_frames: r.len(),
            })
            .collect(),
    )?;

    let ordinals: HashMap<FrameKey, usize> = train
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.sequence_id.clone(), r.frame_id), i))
        .collect();
    let sizes: Vec<usize> = source_train.iter().map(Vec::len).collect();
    let sources = DiskSources {
        datasets,
        train: source_train,
        order: EpochOrder::new(&sizes, seed, 0),
        ordinals: ordinals.clone(),
    };
    let candidates: Vec<(FrameRecord, PathBuf)> = match &cfg.pseudo_labels {
        Some(dir) => train
            .iter()
            .filter_map(|r| {
                let name = Path::new(&r.annotation_path).file_name()?;
                let p = dir.join(name);
                p.is_file().then(|| (r.clone(), p))
            })
            .collect(),
        None => Vec::new(),
    };
    let partners = DiskPartners {
        dataset: target.clone(),
        order: EpochOrder::new(&[candidates.len()], seed, 1),
        candidates,
        ordinals,
    };

    let mut run = AugmentRun {
        seed,
        sources: pool.entries().to_vec(),
        partner_frames: partners.candidates.len(),
        summary: AugmentSummary::default(),
        cutmix_rate: 0.0,
        mixup_rate: 0.0,
    };
    if settings.dry_run {
        println!(
            "would augment {} training frame(s) of {} with {} source(s) and {} pseudo-labeled partner(s) into {}",
            train.len(),
            target.manifest.name,
            pool.len(),
            run.partner_frames,
            settings.out.display()
        );
        return Ok(run);
    }

    let mut out_manifest = target.manifest.clone();
    out_manifest.frames.clear();
    let out = Dataset::new(out_manifest, settings.out.clone());

    let results: Vec<Result<(FrameRecord, ProvenanceEntry), CliError>> = train
        .par_iter()
        .map(|rec| {
            let frame = target.load_frame(rec)?;
            let mut rng = frame_rng(seed, &rec.sequence_id, rec.frame_id);
            let aug = apply_pipeline(&frame, &pool, &sources, &partners, &cfg.augment, &mut rng)?;
            let mut out_rec = rec.clone();
            let mut origin_path = None;
            if aug.frame == frame {
                copy_file(&target.path(&rec.cloud_path), &out.path(&rec.cloud_path))?;
                copy_file(
                    &target.path(&rec.annotation_path),
                    &out.path(&rec.annotation_path),
                )?;
                if let Some(sp) = &rec.sensor_path {
                    copy_file(&target.path(sp), &out.path(sp))?;
                }
            } else {
                if aug.frame.cloud.sensor_id().is_none() {
                    out_rec.sensor_path = None;
                }
                out.write_frame(&out_rec, &aug.frame)?;
                let stem = Path::new(&rec.cloud_path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("{}_{:06}", rec.sequence_id, rec.frame_id));
                let rel = format!("provenance/{stem}.origin");
                write_byte_channel(&out.path(&rel), &aug.provenance.points)?;
                origin_path = Some(rel);
            }
            let entry = ProvenanceEntry {
                sequence_id: rec.sequence_id.clone(),
                frame_id: rec.frame_id,
                points: aug.frame.cloud.len(),
                labels: aug.frame.labels.len(),
                cutmix: aug.cutmix,
                mixup: aug.mixup,
                origin_path,
            };
            Ok((out_rec, entry))
        })
        .collect();

    let mut out = out;
    let mut log = String::new();
    for r in results {
        let (rec, entry) = r?;
        run.summary.record_status(&entry.cutmix, &entry.mixup);
        out.manifest.frames.push(rec);
        log.push_str(&serde_json::to_string(&entry).expect("serializable entry"));
        log.push('\n');
    }
    if out.manifest.split_counts.is_some() {
        out.manifest.split_counts = Some(out.manifest.count_splits());
    }
    run.cutmix_rate = run.summary.cutmix_rate();
    run.mixup_rate = run.summary.mixup_rate();
    out.save()?;
    write_bytes(&settings.out.join("provenance.jsonl"), log.as_bytes())?;
    write_bytes(&settings.out.join("summary.json"), to_json(&run).as_bytes())?;
    Ok(run)
}
