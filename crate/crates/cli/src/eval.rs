use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use railmix_core::ingest::{load_annotations, Dataset, Split};
use railmix_core::metrics::{evaluate, render_table, EvalConfig, EvalReport, FrameBoxes};
use railmix_core::ObjectClass;

use crate::config::Settings;
use crate::data::write_bytes;
use crate::error::CliError;

/// Where the numbers to evaluate come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalInput<'a> {
    /// Detection annotation files against ground truth: a directory of
    /// annotation files or a dataset manifest restricted to `split`.
    Boxes {
        det: &'a Path,
        gt: &'a Path,
        split: Split,
    },
    /// A precomputed report, e.g. to attach Closed Gap afterwards.
    Report(&'a Path),
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Every `*.json` annotation file in `dir`, keyed by file stem, sorted.
pub fn load_box_dir(
    dir: &Path,
    aliases: &BTreeMap<String, ObjectClass>,
) -> Result<Vec<FrameBoxes>, CliError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let ann = load_annotations(p, aliases)?;
            Ok(FrameBoxes {
                sequence_id: stem(p),
                frame_id: ann.frame_id,
                boxes: ann.boxes,
            })
        })
        .collect()
}

fn load_ground_truth(
    gt: &Path,
    split: Split,
) -> Result<(Vec<FrameBoxes>, BTreeMap<String, ObjectClass>), CliError> {
    if gt.is_dir() {
        return Ok((load_box_dir(gt, &BTreeMap::new())?, BTreeMap::new()));
    }
    let ds = Dataset::load(gt)?;
    let aliases = ds.manifest.class_aliases.clone();
    let boxes = ds
        .manifest
        .frames
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let ann = load_annotations(&ds.path(&r.annotation_path), &aliases)?;
            Ok(FrameBoxes {
                sequence_id: stem(Path::new(&r.annotation_path)),
                frame_id: r.frame_id,
                boxes: ann.boxes,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((boxes, aliases))
}

/// Evaluate, attach Closed Gap when both baselines are given, and write
/// `eval_report.json` and `eval_table.txt` into the output directory.
/// Returns the report and its text table.
pub fn cmd_eval(
    input: EvalInput<'_>,
    baselines: Option<(&Path, &Path)>,
    label: &str,
    cfg: &EvalConfig,
    settings: &Settings,
) -> Result<(EvalReport, String), CliError> {
    cfg.validate()?;
    let baselines = baselines
        .map(|(s, o)| Ok::<_, CliError>((read_report(s)?, read_report(o)?)))
        .transpose()?;
    let report = match input {
        EvalInput::Boxes { det, gt, split } => {
            let (gts, aliases) = load_ground_truth(gt, split)?;
            let dets = load_box_dir(det, &aliases)?;
            evaluate(&dets, &gts, cfg, baselines.as_ref().map(|(s, o)| (s, o)))?
        }
        EvalInput::Report(path) => {
            let mut r = read_report(path)?;
            if let Some((s, o)) = &baselines {
                r.attach_closed_gap(s, o);
            }
            r
        }
    };
    let table = render_table(&[(label, "", &report)], cfg);
    if !settings.dry_run {
        write_bytes(
            &settings.out.join("eval_report.json"),
            report.to_json().as_bytes(),
        )?;
        write_bytes(&settings.out.join("eval_table.txt"), table.as_bytes())?;
    }
    Ok((report, table))
}
