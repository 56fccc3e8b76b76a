use std::fs;
use std::path::{Path, PathBuf};

use octdiff::data::{ImageSet, PhantomParams, SpeckleParams};
use octdiff::metrics::SsimParams;
use octdiff::{InferenceConfig, NlmConfig, ScheduleParams, TrainConfig, UNetConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { count: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Image file or directory for `denoise`.
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Model checkpoints, matched to variants by their recorded noise family.
    pub checkpoints: Vec<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    /// Precomputed `<variant>/<id>.png` outputs for `evaluate`.
    pub outputs: Option<PathBuf>,
}

/// Everything a run depends on. Files mirror these field names; flags
/// override file values and the resolved result is written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced this file; ignored when loading.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub schedule: ScheduleParams,
    pub network: UNetConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub nlm: NlmConfig,
    pub phantom: PhantomParams,
    pub speckle: SpeckleParams,
    pub ssim: SsimParams,
    pub simulate: SimulateConfig,
    /// Method used by `denoise`.
    pub variant: Variant,
    /// Methods compared by `evaluate`.
    pub variants: Vec<Variant>,
    /// Corpus set the model is trained on.
    pub train_set: ImageSet,
    /// Corpus set used as ground truth by `evaluate`.
    pub reference: ImageSet,
    pub panel: bool,
    pub jobs: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            schedule: ScheduleParams::default(),
            network: UNetConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            nlm: NlmConfig::default(),
            phantom: PhantomParams::default(),
            speckle: SpeckleParams::default(),
            ssim: SsimParams::default(),
            simulate: SimulateConfig::default(),
            variant: Variant::Gard,
            variants: vec![Variant::Gard, Variant::Ddgm, Variant::DdgmCpdm, Variant::NlmOnly],
            train_set: ImageSet::Avg,
            reference: ImageSet::Avg,
            panel: false,
            jobs: 1,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub const FILE_NAME: &'static str = "run.json";

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("parsing {}: {e}", path.display())))?;
        cfg.command = None;
        Ok(cfg)
    }

    /// Writes the resolved config as `<dir>/run.json`.
    pub fn save(&self, command: &str, dir: &Path) -> CliResult<PathBuf> {
        let out = RunConfig {
            command: Some(command.to_string()),
            ..self.clone()
        };
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE_NAME);
        let text = serde_json::to_string_pretty(&out).map_err(octdiff::Error::from)?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn thread_pool(&self) -> CliResult<rayon::ThreadPool> {
        let n = if self.jobs == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.jobs
        };
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config(format!("cannot start {n} worker threads: {e}")))
    }
}

pub fn require<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::config(format!("no {what} given; pass {flag} or set it in the config file")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            variant: Variant::DdpmNrft,
            paths: Paths {
                checkpoints: vec!["a.ckpt".into()],
                ..Default::default()
            },
            ..Default::default()
        };
        let path = cfg.save("denoise", dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"command\": \"denoise\""));
        assert!(text.contains("\"ddpm+nrft\""));
        assert_eq!(RunConfig::load(Some(&path)).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"inference": {"mu": 3.0}, "variant": "ddgm"}"#).unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!((cfg.inference.mu, cfg.inference.t_start, cfg.variant), (3.0, 70, Variant::Ddgm));
        fs::write(&p, r#"{"inference": {"muu": 3.0}}"#).unwrap();
        assert_eq!(RunConfig::load(Some(&p)).unwrap_err().exit_code(), 2);
        fs::write(&p, r#"{"variant": "cpdm"}"#).unwrap();
        assert!(RunConfig::load(Some(&p)).is_err());
    }
}
