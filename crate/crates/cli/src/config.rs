use std::fs;
use std::path::{Path, PathBuf};

use railmix_core::augment::AugConfig;
use railmix_core::filters::FilterConfig;
use railmix_core::metrics::EvalConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The single JSON file that drives every command. Relative paths resolve
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Target dataset manifest.
    pub target: PathBuf,
    /// Source dataset manifests for CutMix.
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(default)]
    pub augment: AugConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory of scored annotation files for target frames, named like
    /// the target's label files. MixUp partners come from here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.target);
        cfg.sources.iter_mut().for_each(rebase);
        cfg.pseudo_labels.iter_mut().for_each(rebase);
        cfg.output_dir.iter_mut().for_each(rebase);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.filters.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Values shared by all commands after applying flag > config > default.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Whether the output directory came from a flag or the config.
    pub out_given: bool,
    pub jobs: usize,
    pub dry_run: bool,
}

impl Settings {
    pub fn resolve(
        config: Option<&PipelineConfig>,
        seed: Option<u64>,
        out: Option<PathBuf>,
        jobs: Option<usize>,
        dry_run: bool,
    ) -> Result<Self, CliError> {
        if jobs == Some(0) {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        let default_jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
        let out = out.or(config.and_then(|c| c.output_dir.clone()));
        Ok(Self {
            seed: seed.or(config.and_then(|c| c.seed)),
            out_given: out.is_some(),
            out: out.unwrap_or_else(|| PathBuf::from("out")),
            jobs: jobs.or(config.and_then(|c| c.jobs)).unwrap_or(default_jobs),
            dry_run,
        })
    }

    /// The seed, which commands with random decisions require.
    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| {
            CliError::Config("a seed is required (config \"seed\" or --seed)".into())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"target": "t/manifest.json", "seed": 3}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.target, dir.path().join("t/manifest.json"));
        assert_eq!(cfg.augment, AugConfig::default());
        assert_eq!(cfg.seed, Some(3));
    }

    #[test]
    fn config_errors_are_exit_code_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"target": "t", "filters": {"stages": ["intensity", "clip"]}}"#,
        )
        .unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap_err().exit_code(), 2);
        fs::write(&path, r#"{"target": "t", "augment": {"p_cutmix": 2.0}}"#).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap_err().exit_code(), 2);
        fs::write(&path, r#"{"target": "t", "bogus": 1}"#).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap_err().exit_code(), 2);
        assert_eq!(
            PipelineConfig::load(&dir.path().join("missing.json"))
                .unwrap_err()
                .exit_code(),
            3
        );
    }

    #[test]
    fn flag_beats_config_beats_default() {
        let cfg = PipelineConfig {
            target: "t".into(),
            sources: vec![],
            filters: Default::default(),
            augment: Default::default(),
            eval: Default::default(),
            pseudo_labels: None,
            seed: Some(1),
            output_dir: Some("cfg_out".into()),
            jobs: Some(2),
        };
        let s = Settings::resolve(Some(&cfg), Some(9), None, None, false).unwrap();
        assert_eq!(
            (s.seed, s.out.as_path(), s.jobs),
            (Some(9), Path::new("cfg_out"), 2)
        );
        let d = Settings::resolve(None, None, None, Some(4), true).unwrap();
        assert_eq!(
            (d.seed, d.out.as_path(), d.jobs),
            (None, Path::new("out"), 4)
        );
        assert!(d.require_seed().is_err());
    }
}
