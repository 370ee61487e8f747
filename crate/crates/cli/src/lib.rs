//! `railmix` command-line pipeline: dataset validation and splitting,
//! filtering, CutMix/MixUp augmentation, evaluation, statistics and an
//! oracle self-test.
//!
//! Exit codes: 0 ok, 1 validation failure, 2 config error, 3 I/O error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use railmix_core::ingest::{DomainKind, Split};
use railmix_core::scenegen::SceneStyle;
use railmix_core::ObjectClass;

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod selftest;

pub use config::{PipelineConfig, Settings};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "railmix",
    version,
    about = "Railway LiDAR domain-adaptation data pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Report planned actions without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassArg {
    Car,
    Pedestrian,
}

impl From<ClassArg> for ObjectClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Car => ObjectClass::Car,
            ClassArg::Pedestrian => ObjectClass::Pedestrian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    SyntheticRail,
    RealRail,
    RealAuto,
}

impl From<DomainArg> for DomainKind {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::SyntheticRail => DomainKind::SyntheticRail,
            DomainArg::RealRail => DomainKind::RealRail,
            DomainArg::RealAuto => DomainKind::RealAuto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    Rail,
    Surround,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset manifest and load every frame.
    Validate { manifest: PathBuf },
    /// Assign train/val/test splits by the 10-frame batch rule.
    Split { manifest: PathBuf },
    /// Filter the target and source datasets from the config.
    Filter,
    /// Augment the target training split with CutMix and MixUp.
    Augment,
    /// Compute AP BEV / AP 3D and, with baselines, Closed Gap.
    Eval {
        /// Directory of detection annotation files (with scores).
        #[arg(long, requires = "gt", conflicts_with = "report")]
        det: Option<PathBuf>,
        /// Ground truth: annotation directory or dataset manifest.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Split used when `--gt` is a manifest.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Precomputed report instead of `--det`/`--gt`.
        #[arg(long, required_unless_present = "det")]
        report: Option<PathBuf>,
        /// Source-only baseline report.
        #[arg(long, requires = "oracle")]
        source_only: Option<PathBuf>,
        /// Oracle baseline report.
        #[arg(long, requires = "source_only")]
        oracle: Option<PathBuf>,
        /// Row label in the table.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Point height and range statistics as mean ± std.
    Stats {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        class: Option<ClassArg>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Check the geometry and metric code against brute-force oracles.
    Selftest {
        /// Random cases per check.
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, value_enum, default_value = "synthetic-rail")]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "rail")]
        style: StyleArg,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        cars: usize,
        #[arg(long, default_value_t = 2)]
        pedestrians: usize,
    },
}

fn require_config(cfg: Option<PipelineConfig>) -> Result<PipelineConfig, CliError> {
    cfg.ok_or_else(|| CliError::Config("this command needs --config".into()))
}

/// Run one parsed invocation; returns the text for standard output.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let g = &cli.global;
    let config = g.config.as_deref().map(PipelineConfig::load).transpose()?;
    let settings = Settings::resolve(config.as_ref(), g.seed, g.out.clone(), g.jobs, g.dry_run)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command, config, &settings))
}

fn dispatch(
    command: Command,
    config: Option<PipelineConfig>,
    settings: &Settings,
) -> Result<String, CliError> {
    match command {
        Command::Validate { manifest } => {
            let report = data::cmd_validate(&manifest, settings)?;
            if report.is_clean() {
                Ok(format!("ok: {} frame(s)\n", report.frames))
            } else {
                Err(CliError::Validation(format!(
                    "{} problem(s): {}",
                    report.problems.len(),
                    report.problems.join("; ")
                )))
            }
        }
        Command::Split { manifest } => {
            // Without an explicit output the manifest is rewritten in place.
            let out = settings.out_given.then_some(settings.out.as_path());
            let ds = data::cmd_split(&manifest, out, settings)?;
            let c = ds.manifest.count_splits();
            Ok(format!(
                "train {} / val {} / test {}\n",
                c.train, c.val, c.test
            ))
        }
        Command::Filter => {
            let cfg = require_config(config)?;
            let stats = data::cmd_filter(&cfg, settings)?;
            Ok(data::to_json(&stats))
        }
        Command::Augment => {
            let cfg = require_config(config)?;
            let run = augment::cmd_augment(&cfg, settings)?;
            Ok(data::to_json(&run))
        }
        Command::Eval {
            det,
            gt,
            split,
            report,
            source_only,
            oracle,
            label,
        } => {
            let eval_cfg = config.map(|c| c.eval).unwrap_or_default();
            let input = match (&det, &gt, &report) {
                (Some(d), Some(g), None) => eval::EvalInput::Boxes {
                    det: d,
                    gt: g,
                    split: split.into(),
                },
                (None, _, Some(r)) => eval::EvalInput::Report(r),
                _ => {
                    return Err(CliError::Config(
                        "give either --det with --gt, or --report".into(),
                    ))
                }
            };
            let baselines = source_only.as_deref().zip(oracle.as_deref());
            let (_, table) = eval::cmd_eval(input, baselines, &label, &eval_cfg, settings)?;
            Ok(table)
        }
        Command::Stats {
            manifest,
            class,
            split,
        } => {
            let report = data::cmd_stats(
                &manifest,
                class.map(Into::into),
                split.map(Into::into),
                settings,
            )?;
            Ok(report.render())
        }
        Command::Selftest { samples } => {
            let summary = selftest::cmd_selftest(samples, settings.seed.unwrap_or(0));
            let text = data::to_json(&summary);
            if !settings.dry_run && settings.out_given {
                data::write_bytes(&settings.out.join("selftest.json"), text.as_bytes())?;
            }
            if summary.passed {
                Ok(text)
            } else {
                Err(CliError::Validation(format!(
                    "selftest failed: {}",
                    text.trim()
                )))
            }
        }
        Command::Generate {
            name,
            domain,
            style,
            frames,
            cars,
            pedestrians,
        } => {
            let args = data::GenerateArgs {
                name,
                domain: domain.into(),
                style: match style {
                    StyleArg::Rail => SceneStyle::RailFrustum,
                    StyleArg::Surround => SceneStyle::Surround,
                },
                frames,
                cars,
                pedestrians,
            };
            match data::cmd_generate(&args, settings)? {
                Some(ds) => Ok(format!(
                    "wrote {} frame(s) to {}\n",
                    ds.manifest.frames.len(),
                    ds.root.display()
                )),
                None => Ok(String::new()),
            }
        }
    }
}
