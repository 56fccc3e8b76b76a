pub mod denoise;
pub mod evaluate;
pub mod schedule_dump;
pub mod simulate;
pub mod train;

use std::collections::HashMap;
use std::path::Path;

use log::info;
use octdiff::denoiser::load_checkpoint;
use octdiff::{NoiseFamily, UNet, Variant};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Models from `paths.checkpoints`, keyed by the noise family recorded in
/// each file. Every family some variant in `variants` needs must be present.
pub fn load_models(cfg: &RunConfig, variants: &[Variant]) -> CliResult<HashMap<NoiseFamily, UNet>> {
    let mut models = HashMap::new();
    for path in &cfg.paths.checkpoints {
        let ckpt = load_checkpoint(path).map_err(|e| CliError::at(path, e))?;
        ckpt.meta.check_schedule(&cfg.schedule)?;
        let family = ckpt.meta.noise_family;
        info!(
            "loaded {family} model from {} (iteration {})",
            path.display(),
            ckpt.meta.iteration
        );
        if models.insert(family, ckpt.net).is_some() {
            return Err(CliError::config(format!("more than one {family} checkpoint given")));
        }
    }
    for v in variants {
        if let Some(family) = v.family() {
            if !models.contains_key(&family) {
                return Err(CliError::config(format!(
                    "variant {v} needs a model trained with {family} noise; pass --checkpoint"
                )));
            }
        }
    }
    Ok(models)
}

/// Fails when `path` exists and overwriting was not requested.
pub fn check_target(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}
