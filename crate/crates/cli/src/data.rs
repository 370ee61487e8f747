use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use railmix_core::filters::FilterStage;
use railmix_core::ingest::{
    assign_splits_batch10, ClassCounts, Dataset, DatasetStats, DomainKind, FrameRecord,
    IntensityMode, PointRecord, Split,
};
use railmix_core::metrics::{cloud_stats, CloudStats};
use railmix_core::scenegen::{gen_dataset, SceneStyle};
use railmix_core::ObjectClass;

use crate::config::{PipelineConfig, Settings};
use crate::error::CliError;

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

/// Result of `validate`: every problem found, empty when clean.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub manifest: PathBuf,
    pub frames: usize,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Run manifest checks and load every frame.
pub fn cmd_validate(manifest: &Path, settings: &Settings) -> Result<ValidationReport, CliError> {
    let dataset = Dataset::load(manifest)?;
    let mut report = ValidationReport {
        manifest: manifest.to_path_buf(),
        frames: dataset.manifest.frames.len(),
        problems: dataset.manifest.check(),
    };
    if settings.dry_run {
        println!(
            "would load {} frame(s) from {}",
            report.frames,
            manifest.display()
        );
        return Ok(report);
    }
    let per_frame: Vec<Vec<String>> = dataset
        .manifest
        .frames
        .par_iter()
        .map(|rec| match dataset.load_frame(rec) {
            Ok(frame) if frame.frame_id != rec.frame_id => {
                vec![format!("{}: frame id mismatch", rec.annotation_path)]
            }
            Ok(_) => Vec::new(),
            Err(e) => vec![e.to_string()],
        })
        .collect();
    report.problems.extend(per_frame.into_iter().flatten());
    Ok(report)
}

/// Reassign splits by the 10-frame batch rule in manifest order.
///
/// The manifest is rewritten in place, or written to `<out>/manifest.json`
/// with absolute frame paths when `out` is given.
pub fn cmd_split(
    manifest: &Path,
    out: Option<&Path>,
    settings: &Settings,
) -> Result<Dataset, CliError> {
    let mut dataset = Dataset::load(manifest)?;
    let splits = assign_splits_batch10(dataset.manifest.frames.len());
    for (rec, split) in dataset.manifest.frames.iter_mut().zip(splits) {
        rec.split = split;
    }
    dataset.manifest.split_counts = Some(dataset.manifest.count_splits());
    if let Some(dir) = out {
        let root = dataset.root.clone();
        let abs = |p: &mut String| *p = root.join(&*p).to_string_lossy().into_owned();
        for rec in &mut dataset.manifest.frames {
            abs(&mut rec.cloud_path);
            abs(&mut rec.annotation_path);
            rec.sensor_path.iter_mut().for_each(abs);
        }
        dataset.root = dir.to_path_buf();
    }
    if !settings.dry_run {
        write_bytes(
            &dataset.root.join("manifest.json"),
            dataset.manifest_json().as_bytes(),
        )?;
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FilterStats {
    pub before: DatasetStats,
    pub after: DatasetStats,
    pub points_before: usize,
    pub points_after: usize,
}

/// Filter the target and every source into `<out>/<dataset name>/`.
pub fn cmd_filter(
    cfg: &PipelineConfig,
    settings: &Settings,
) -> Result<BTreeMap<String, FilterStats>, CliError> {
    let mut all = BTreeMap::new();
    for manifest in std::iter::once(&cfg.target).chain(&cfg.sources) {
        let dataset = Dataset::load(manifest)?;
        dataset.manifest.validate()?;
        let name = dataset.manifest.name.clone();
        if all.contains_key(&name) {
            return Err(CliError::Config(format!(
                "dataset name {name:?} used twice"
            )));
        }
        let plan = cfg.filters.plan_for(&dataset.manifest)?;
        if settings.dry_run {
            println!(
                "would filter {} ({} frames) with stages {:?} into {}",
                name,
                dataset.manifest.frames.len(),
                plan.stages,
                settings.out.join(&name).display()
            );
            all.insert(name, FilterStats::default());
            continue;
        }

        let mut out_manifest = dataset.manifest.clone();
        if plan.stages.contains(&FilterStage::GroundAlign) {
            out_manifest.ground_z_offset = 0.0;
        }
        if plan.stages.contains(&FilterStage::Intensity) {
            out_manifest.native_intensity_max = 1.0;
            out_manifest.point_record = match plan.intensity_mode {
                IntensityMode::Absent => PointRecord::XYZ,
                _ => PointRecord::XYZI,
            };
        }
        let out = Dataset::new(out_manifest, settings.out.join(&name));

        type Counted = (ClassCounts, ClassCounts, usize, usize);
        let results: Vec<Result<Counted, CliError>> = dataset
            .manifest
            .frames
            .par_iter()
            .map(|rec| {
                let frame = dataset.load_frame(rec)?;
                let filtered = plan.apply(&frame)?;
                out.write_frame(rec, &filtered)?;
                let count = |f: &railmix_core::Frame| {
                    let mut c = ClassCounts::default();
                    f.labels.iter().for_each(|l| c.add(l.class));
                    c
                };
                Ok((
                    count(&frame),
                    count(&filtered),
                    frame.cloud.len(),
                    filtered.cloud.len(),
                ))
            })
            .collect();
        let mut stats = FilterStats {
            before: DatasetStats {
                frames: dataset.manifest.count_splits(),
                ..Default::default()
            },
            after: DatasetStats {
                frames: dataset.manifest.count_splits(),
                ..Default::default()
            },
            ..Default::default()
        };
        for r in results {
            let (b, a, pb, pa) = r?;
            stats.before.labels.car += b.car;
            stats.before.labels.pedestrian += b.pedestrian;
            stats.after.labels.car += a.car;
            stats.after.labels.pedestrian += a.pedestrian;
            stats.points_before += pb;
            stats.points_after += pa;
        }
        out.save()?;
        all.insert(name, stats);
    }
    if !settings.dry_run {
        write_bytes(
            &settings.out.join("filter_stats.json"),
            to_json(&all).as_bytes(),
        )?;
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatsReport {
    pub dataset: DatasetStats,
    pub cloud: CloudStats,
}

impl StatsReport {
    /// Plain-text form with `mean m ± std` values.
    pub fn render(&self) -> String {
        format!(
            "frames: train {} / val {} / test {}\nlabels: car {}, pedestrian {}\npoints: {}\nheight: {}\nrange: {}\n",
            self.dataset.frames.train,
            self.dataset.frames.val,
            self.dataset.frames.test,
            self.dataset.labels.car,
            self.dataset.labels.pedestrian,
            self.cloud.points,
            self.cloud.height,
            self.cloud.range,
        )
    }
}

/// Height and range statistics over a dataset, optionally restricted to a
/// split and to points inside boxes of one class.
pub fn cmd_stats(
    manifest: &Path,
    class: Option<ObjectClass>,
    split: Option<Split>,
    settings: &Settings,
) -> Result<StatsReport, CliError> {
    let mut dataset = Dataset::load(manifest)?;
    if let Some(s) = split {
        dataset.manifest.frames.retain(|r| r.split == s);
    }
    let frames = dataset.load_all()?;
    let mut labels = ClassCounts::default();
    frames
        .iter()
        .flat_map(|f| &f.labels)
        .for_each(|l| labels.add(l.class));
    let report = StatsReport {
        dataset: DatasetStats {
            frames: dataset.manifest.count_splits(),
            labels,
        },
        cloud: cloud_stats(&frames, class)?,
    };
    if !settings.dry_run {
        write_bytes(
            &settings.out.join("stats.json"),
            to_json(&report).as_bytes(),
        )?;
    }
    Ok(report)
}

/// Parameters of `generate`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateArgs {
    pub name: String,
    pub domain: DomainKind,
    pub style: SceneStyle,
    pub frames: usize,
    pub cars: usize,
    pub pedestrians: usize,
}

/// Write a synthetic dataset into `<out>`.
pub fn cmd_generate(args: &GenerateArgs, settings: &Settings) -> Result<Option<Dataset>, CliError> {
    let seed = settings.require_seed()?;
    if settings.dry_run {
        println!(
            "would generate {} frame(s) into {}",
            args.frames,
            settings.out.display()
        );
        return Ok(None);
    }
    let ds = gen_dataset(
        &settings.out,
        &args.name,
        args.domain,
        args.style,
        args.frames,
        args.cars,
        args.pedestrians,
        seed,
    )?;
    Ok(Some(ds))
}

/// Frame records of one split.
pub(crate) fn records_of(dataset: &Dataset, split: Split) -> Vec<FrameRecord> {
    dataset
        .manifest
        .frames
        .iter()
        .filter(|r| r.split == split)
        .cloned()
        .collect()
}
