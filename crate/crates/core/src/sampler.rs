//! Seeded Gamma and Gaussian noise.
//!
//! All randomness flows from [`ChaCha8Rng`]. A `u64` seed is expanded with
//! `ChaCha8Rng::seed_from_u64`; independent sub-streams for images,
//! iterations or workers are derived by [`substream`], which keeps the key
//! and selects the ChaCha stream id. Draws are made in `f64`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Generator used throughout the crate.
pub type SeedRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives stream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> SeedRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gamma,
    Gaussian,
}

impl std::fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gamma => "gamma",
            NoiseFamily::Gaussian => "gaussian",
        })
    }
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(NoiseFamily::Gamma),
            "gaussian" => Ok(NoiseFamily::Gaussian),
            other => Err(Error::invalid(format!("unknown noise family `{other}`"))),
        }
    }
}

/// Gamma(shape, scale) sampler.
///
/// Marsaglia-Tsang squeeze/acceptance for `shape >= 1`. For `shape < 1` a
/// Gamma(shape + 1) draw is multiplied by `U^(1/shape)`, evaluated in the log
/// domain. Draws that underflow are clamped to `f64::MIN_POSITIVE` so every
/// draw stays strictly positive.
#[derive(Debug, Clone, Copy)]
pub struct GammaSampler {
    shape: f64,
    scale: f64,
    d: f64,
    c: f64,
    boosted: bool,
}

impl GammaSampler {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::invalid(format!("gamma shape must be positive, got {shape}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("gamma scale must be positive, got {scale}")));
        }
        let boosted = shape < 1.0;
        let a = if boosted { shape + 1.0 } else { shape };
        let d = a - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        Ok(Self {
            shape,
            scale,
            d,
            c,
            boosted,
        })
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn variance(&self) -> f64 {
        self.shape * self.scale * self.scale
    }

    fn standard<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let v = 1.0 + self.c * z;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u: f64 = rng.random();
            let z2 = z * z;
            if u < 1.0 - 0.0331 * z2 * z2 {
                return self.d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * z2 + self.d * (1.0 - v + v.ln()) {
                return self.d * v;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = if self.boosted {
            let y = self.standard(rng);
            // open interval (0, 1)
            let u: f64 = loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u;
                }
            };
            (y.ln() + u.ln() / self.shape).exp()
        } else {
            self.standard(rng)
        };
        (x * self.scale).max(f64::MIN_POSITIVE)
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for v in out {
            *v = self.sample(rng);
        }
    }
}

/// `n` i.i.d. draws from Gamma(`shape`, `scale`).
pub fn sample_gamma(shape: f64, scale: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let sampler = GammaSampler::new(shape, scale)?;
    let mut rng = rng_from_seed(seed);
    let mut out = vec![0.0; n];
    sampler.fill(&mut rng, &mut out);
    Ok(out)
}

/// What was done to the raw draw before it was stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseForm {
    Raw,
    /// Mean subtracted.
    Centered,
    /// Mean subtracted and divided by the standard deviation.
    Standardized,
}

/// A sampled noise realization with the analytic moments of the raw draw.
#[derive(Debug, Clone)]
pub struct NoiseField {
    pub values: Array2<f64>,
    pub family: NoiseFamily,
    pub form: NoiseForm,
    /// Gamma shape; `None` for Gaussian noise.
    pub shape_param: Option<f64>,
    /// Gamma scale, or the standard deviation for Gaussian noise.
    pub scale_param: f64,
    /// Mean of the uncentered draw.
    pub mean: f64,
    pub variance: f64,
}

fn gamma_field<R: Rng + ?Sized>(
    shape: f64,
    scale: f64,
    dim: (usize, usize),
    form: NoiseForm,
    rng: &mut R,
) -> Result<NoiseField> {
    let sampler = GammaSampler::new(shape, scale)?;
    let (mean, variance) = (sampler.mean(), sampler.variance());
    let std = variance.sqrt();
    let values = Array2::from_shape_simple_fn(dim, || {
        let g = sampler.sample(rng);
        match form {
            NoiseForm::Raw => g,
            NoiseForm::Centered => g - mean,
            NoiseForm::Standardized => (g - mean) / std,
        }
    });
    Ok(NoiseField {
        values,
        family: NoiseFamily::Gamma,
        form,
        shape_param: Some(shape),
        scale_param: scale,
        mean,
        variance,
    })
}

fn gaussian_field<R: Rng + ?Sized>(
    std: f64,
    dim: (usize, usize),
    form: NoiseForm,
    rng: &mut R,
) -> NoiseField {
    let unit = form == NoiseForm::Standardized;
    let values = Array2::from_shape_simple_fn(dim, || {
        let z: f64 = rng.sample(StandardNormal);
        if unit {
            z
        } else {
            std * z
        }
    });
    NoiseField {
        values,
        family: NoiseFamily::Gaussian,
        form,
        shape_param: None,
        scale_param: std,
        mean: 0.0,
        variance: std * std,
    }
}

/// `g_bar_t - E[g_bar_t]` with `g_bar_t ~ Gamma(k_cum_t, theta_t)`; its
/// variance is `1 - alpha_bar_t`.
pub fn centered_cumulative_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    dim: (usize, usize),
    rng: &mut R,
) -> Result<NoiseField> {
    let shape = schedule.gamma_shape_cum(t)?;
    let scale = schedule.gamma_scale(t)?;
    gamma_field(shape, scale, dim, NoiseForm::Centered, rng)
}

pub fn sample_centered_cumulative_noise(
    schedule: &NoiseSchedule,
    t: usize,
    dim: (usize, usize),
    seed: u64,
) -> Result<NoiseField> {
    centered_cumulative_noise(schedule, t, dim, &mut rng_from_seed(seed))
}

/// Zero-mean, unit-variance noise: the standardized cumulative Gamma draw
/// at `t`, or a standard normal field.
pub fn standardized_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    family: NoiseFamily,
    dim: (usize, usize),
    rng: &mut R,
) -> Result<NoiseField> {
    match family {
        NoiseFamily::Gamma => {
            let shape = schedule.gamma_shape_cum(t)?;
            let scale = schedule.gamma_scale(t)?;
            gamma_field(shape, scale, dim, NoiseForm::Standardized, rng)
        }
        NoiseFamily::Gaussian => {
            schedule.check_timestep(t)?;
            Ok(gaussian_field(schedule.marginal_std(t)?, dim, NoiseForm::Standardized, rng))
        }
    }
}

pub fn sample_standardized_noise(
    schedule: &NoiseSchedule,
    t: usize,
    family: NoiseFamily,
    dim: (usize, usize),
    seed: u64,
) -> Result<NoiseField> {
    standardized_noise(schedule, t, family, dim, &mut rng_from_seed(seed))
}

/// Centered single-step noise of the forward process: `g_t - E[g_t]` with
/// `g_t ~ Gamma(k_t, theta_t)`, or `N(0, beta_t)`. Variance `beta_t`.
pub fn step_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    family: NoiseFamily,
    dim: (usize, usize),
    rng: &mut R,
) -> Result<NoiseField> {
    match family {
        NoiseFamily::Gamma => {
            let shape = schedule.gamma_shape(t)?;
            let scale = schedule.gamma_scale(t)?;
            gamma_field(shape, scale, dim, NoiseForm::Centered, rng)
        }
        NoiseFamily::Gaussian => Ok(gaussian_field(
            schedule.beta(t)?.sqrt(),
            dim,
            NoiseForm::Centered,
            rng,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn rejects_non_positive_parameters() {
        assert!(sample_gamma(0.0, 1.0, 10, 1).is_err());
        assert!(sample_gamma(1.0, -1.0, 10, 1).is_err());
        assert!(sample_gamma(1.0, 1.0, 0, 1).is_err());
        assert!(sample_gamma(f64::NAN, 1.0, 10, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = sample_gamma(0.3, 2.0, 1000, 42).unwrap();
        let b = sample_gamma(0.3, 2.0, 1000, 42).unwrap();
        let c = sample_gamma(0.3, 2.0, 1000, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn substreams_differ() {
        let a: u64 = substream(5, 0).random();
        let b: u64 = substream(5, 1).random();
        let a2: u64 = substream(5, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn small_shape_draws_are_positive() {
        let xs = sample_gamma(0.01, 0.1, 200_000, 9).unwrap();
        assert!(xs.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn gamma_moments_k2_theta3() {
        let xs = sample_gamma(2.0, 3.0, 1_000_000, 11).unwrap();
        let (m, v) = moments(&xs);
        // std of the mean estimator: sqrt(18 / 1e6)
        assert!((m - 6.0).abs() < 3.0 * (18.0f64 / 1e6).sqrt(), "mean {m}");
        assert!((v - 18.0).abs() / 18.0 < 0.03, "var {v}");
    }

    #[test]
    fn exponential_special_case_passes_ks() {
        let mut xs = sample_gamma(1.0, 1.0, 1_000_000, 3).unwrap();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-x).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
    }

    #[test]
    fn tiny_shape_mean() {
        let xs = sample_gamma(0.01, 0.1, 1_000_000, 5).unwrap();
        let (m, _) = moments(&xs);
        assert!((m - 0.001).abs() / 0.001 < 0.05, "mean {m}");
    }

    #[test]
    fn metadata_matches_analytic_moments() {
        let s = ScheduleParams::default().build().unwrap();
        let f = sample_centered_cumulative_noise(&s, 50, (8, 8), 1).unwrap();
        let k = s.gamma_shape_cum(50).unwrap();
        let th = s.gamma_scale(50).unwrap();
        assert_eq!(f.mean, k * th);
        assert_eq!(f.variance, k * th * th);
        assert_eq!(f.shape_param, Some(k));
        assert!(sample_centered_cumulative_noise(&s, 0, (8, 8), 1).is_err());
        assert!(sample_standardized_noise(&s, 1001, NoiseFamily::Gaussian, (8, 8), 1).is_err());
    }

    #[test]
    fn centered_cumulative_field_mean() {
        let s = ScheduleParams::default().build().unwrap();
        let f = sample_centered_cumulative_noise(&s, 1, (256, 256), 21).unwrap();
        let m = f.values.mean().unwrap();
        let bound = 4.0 * ((1.0 - s.alpha_bar(1).unwrap()) / 65536.0).sqrt();
        assert!(m.abs() < bound, "{m} vs {bound}");
    }

    #[test]
    fn centered_cumulative_variance_and_skew() {
        let s = ScheduleParams::default().build().unwrap();
        let f = sample_centered_cumulative_noise(&s, 500, (100, 1000), 8).unwrap();
        let (_, v) = moments(f.values.as_slice().unwrap());
        // 1 - alpha_bar_500 from the independent schedule evaluation
        let target = 0.921_412_757_118_221_8;
        assert!((v - target).abs() / target < 0.02, "{v}");

        let f = sample_centered_cumulative_noise(&s, 50, (100, 1000), 8).unwrap();
        let xs = f.values.as_slice().unwrap();
        let (m, v) = moments(xs);
        let skew = xs.iter().map(|x| ((x - m) / v.sqrt()).powi(3)).sum::<f64>() / xs.len() as f64;
        assert!(skew > 0.0);
    }

    #[test]
    fn standardized_noise_moments() {
        let s = ScheduleParams::default().build().unwrap();
        let f = sample_standardized_noise(&s, 100, NoiseFamily::Gamma, (100, 1000), 2).unwrap();
        let (m, v) = moments(f.values.as_slice().unwrap());
        assert!(m.abs() < 0.02);
        assert!((0.97..=1.03).contains(&v));

        let g = sample_standardized_noise(&s, 100, NoiseFamily::Gaussian, (100, 1000), 2).unwrap();
        let xs = g.values.as_slice().unwrap();
        let (m, v) = moments(xs);
        let kurt = xs.iter().map(|x| ((x - m) / v.sqrt()).powi(4)).sum::<f64>() / xs.len() as f64;
        assert!((kurt - 3.0).abs() < 0.1, "excess kurtosis {}", kurt - 3.0);
    }

    #[test]
    fn standardized_gamma_respects_support_bound() {
        let s = ScheduleParams::default().build().unwrap();
        let f = sample_standardized_noise(&s, 5, NoiseFamily::Gamma, (100, 1000), 4).unwrap();
        // -E[g_bar_5] / sqrt(1 - alpha_bar_5), frozen from the schedule oracle
        let bound = -0.264_479_603_865_418_64;
        let min = f.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= bound - 1e-12, "{min}");
    }
}
