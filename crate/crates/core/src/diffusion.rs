//! Forward noising, single reverse steps and the deterministic DDIM loop.
//!
//! States `x_t` are [`Domain::Latent`] fields on the normalized scale. The
//! reverse loop starts from the observation itself (`x_{t_start} = y`) and
//! only clamps back into `[-1, 1]` once, at the very end.

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserBackend;
use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};
use crate::sampler::{self, rng_from_seed, NoiseFamily, NoiseField};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// `sigma_t = 0`
    Deterministic,
    Stochastic,
}

/// Data-fidelity refinement applied after every reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    None,
    /// Guide is the noisy input itself.
    Raw,
    /// Guide is the NLM-filtered input.
    Nrft,
}

impl std::fmt::Display for Fidelity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fidelity::None => "none",
            Fidelity::Raw => "raw",
            Fidelity::Nrft => "nrft",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub t_start: usize,
    pub stride: usize,
    pub sigma_mode: SigmaMode,
    pub fidelity: Fidelity,
    pub mu: f64,
    pub noise_family: NoiseFamily,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            t_start: 70,
            stride: 10,
            sigma_mode: SigmaMode::Deterministic,
            fidelity: Fidelity::Nrft,
            mu: 10.0,
            noise_family: NoiseFamily::Gamma,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_start == 0 || self.t_start > schedule.steps() {
            return Err(Error::invalid(format!(
                "t_start must lie in [1, {}], got {}",
                schedule.steps(),
                self.t_start
            )));
        }
        if self.stride == 0 || self.stride > self.t_start {
            return Err(Error::invalid(format!(
                "stride must lie in [1, t_start={}], got {}",
                self.t_start, self.stride
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    /// Timesteps at which the backend is evaluated, descending:
    /// `t_start, t_start - stride, ...` down to the last positive value. The
    /// step from the last of these goes straight to 0.
    pub fn timestep_grid(&self) -> Vec<usize> {
        (1..=self.t_start).rev().step_by(self.stride.max(1)).collect()
    }
}

fn combine(a: &Array2<f64>, ca: f64, b: &Array2<f64>, cb: f64) -> Array2<f64> {
    Zip::from(a).and(b).map_collect(|&x, &y| ca * x + cb * y)
}

/// One forward step `x_t = sqrt(1 - beta_t) x_{t-1} + (g_t - E[g_t])` with
/// Gamma noise.
pub fn forward_step(schedule: &NoiseSchedule, x_prev: &ImageField, t: usize, seed: u64) -> Result<ImageField> {
    forward_step_with(schedule, x_prev, t, NoiseFamily::Gamma, &mut rng_from_seed(seed))
}

pub fn forward_step_with<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x_prev: &ImageField,
    t: usize,
    family: NoiseFamily,
    rng: &mut R,
) -> Result<ImageField> {
    x_prev.expect_model_scale()?;
    let keep = (1.0 - schedule.beta(t)?).sqrt();
    let noise = sampler::step_noise(schedule, t, family, x_prev.dim(), rng)?;
    Ok(ImageField::from_parts(
        combine(x_prev.values(), keep, &noise.values, 1.0),
        Domain::Latent,
    ))
}

/// Closed-form `x_t = sqrt(alpha_bar_t) x0 + (g_bar_t - E[g_bar_t])` with
/// Gamma noise. Also returns the standardized noise `eps`, the training
/// target.
pub fn forward_marginal(
    schedule: &NoiseSchedule,
    x0: &ImageField,
    t: usize,
    seed: u64,
) -> Result<(ImageField, NoiseField)> {
    forward_marginal_with(schedule, x0, t, NoiseFamily::Gamma, &mut rng_from_seed(seed))
}

pub fn forward_marginal_with<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x0: &ImageField,
    t: usize,
    family: NoiseFamily,
    rng: &mut R,
) -> Result<(ImageField, NoiseField)> {
    x0.expect_model_scale()?;
    let eps = sampler::standardized_noise(schedule, t, family, x0.dim(), rng)?;
    let x_t = noisy_from_eps(schedule, x0.values(), &eps.values, t)?;
    Ok((ImageField::from_parts(x_t, Domain::Latent), eps))
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`
pub(crate) fn noisy_from_eps(
    schedule: &NoiseSchedule,
    x0: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    let ab = schedule.alpha_bar(t)?;
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// `(x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`
pub fn predict_x0(schedule: &NoiseSchedule, x_t: &ImageField, eps_hat: &Array2<f64>, t: usize) -> Result<ImageField> {
    x_t.expect_model_scale()?;
    x_t.expect_same_shape(eps_hat.dim())?;
    let ab = schedule.alpha_bar(t)?;
    let inv = 1.0 / ab.sqrt();
    Ok(ImageField::from_parts(
        combine(x_t.values(), inv, eps_hat, -(1.0 - ab).sqrt() * inv),
        Domain::Latent,
    ))
}

/// One ancestral reverse step
/// `(x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t z`
/// with `z` standardized noise of `family` at `t`.
pub fn reverse_step_stochastic(
    schedule: &NoiseSchedule,
    x_t: &ImageField,
    eps_hat: &Array2<f64>,
    t: usize,
    sigma_t: f64,
    family: NoiseFamily,
    seed: u64,
) -> Result<ImageField> {
    reverse_step_with(schedule, x_t, eps_hat, t, sigma_t, family, &mut rng_from_seed(seed))
}

pub fn reverse_step_with<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x_t: &ImageField,
    eps_hat: &Array2<f64>,
    t: usize,
    sigma_t: f64,
    family: NoiseFamily,
    rng: &mut R,
) -> Result<ImageField> {
    x_t.expect_model_scale()?;
    x_t.expect_same_shape(eps_hat.dim())?;
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(Error::invalid(format!("sigma_t must be finite and >= 0, got {sigma_t}")));
    }
    let alpha = schedule.alpha(t)?;
    let coef = (1.0 - alpha) / schedule.marginal_std(t)?;
    let inv = 1.0 / alpha.sqrt();
    let mut out = combine(x_t.values(), inv, eps_hat, -coef * inv);
    if sigma_t > 0.0 {
        let z = sampler::standardized_noise(schedule, t, family, x_t.dim(), rng)?;
        out.scaled_add(sigma_t, &z.values);
    }
    Ok(ImageField::from_parts(out, Domain::Latent))
}

/// Deterministic DDIM from `x_start` (entered as `x_{t_start}` unchanged)
/// down to 0 on the grid of [`InferenceConfig::timestep_grid`].
///
/// Each grid point costs one backend evaluation; the last one jumps straight
/// to the predicted `x0`. When `cfg.fidelity` is not `None`, `refine(x, t')`
/// replaces the state after every step, the final one included. The result is
/// clamped to `[-1, 1]`.
pub fn ddim_trajectory<B, F>(
    schedule: &NoiseSchedule,
    x_start: &ImageField,
    backend: &B,
    cfg: &InferenceConfig,
    mut refine: F,
) -> Result<ImageField>
where
    B: DenoiserBackend + ?Sized,
    F: FnMut(&ImageField, usize) -> Result<ImageField>,
{
    cfg.validate(schedule)?;
    if cfg.sigma_mode != SigmaMode::Deterministic {
        return Err(Error::invalid(
            "ddim_trajectory is deterministic; use reverse_step_stochastic for sigma_t > 0",
        ));
    }
    x_start.expect_model_scale()?;
    let grid = cfg.timestep_grid();
    let mut x = x_start.to_latent()?;
    for (i, &t) in grid.iter().enumerate() {
        let t_next = grid.get(i + 1).copied().unwrap_or(0);
        let eps = backend.predict(&x, t)?;
        x.expect_same_shape(eps.dim())?;
        let x0 = predict_x0(schedule, &x, &eps, t)?;
        x = if t_next == 0 {
            x0
        } else {
            ImageField::from_parts(noisy_from_eps(schedule, x0.values(), &eps, t_next)?, Domain::Latent)
        };
        if cfg.fidelity != Fidelity::None {
            x = refine(&x, t_next)?;
            x.expect_model_scale()?;
        }
        if x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend(format!("non-finite state after the step from t={t}")));
        }
    }
    x.clamp_normalized()
}
